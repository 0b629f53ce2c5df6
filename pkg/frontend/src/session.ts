/**
 * Client-side session state machine.
 *
 * The view never simulates anything locally: it renders the frames the
 * server sends, tracks one pending reply per issued command id, follows
 * resize transitions (discarding stale-sized frames until the resize ack
 * lands), and keeps a sliding-window FPS estimate.
 */

import { Command, FrameMessage, ServerMessage, TextRecord } from "./protocol.js";

export type ConnectionState = "connecting" | "ready" | "closed";

export interface Transport {
  sendCommand(line: Uint8Array): void;
  close(): void;
}

interface Pending {
  resolve: (reply: TextRecord) => void;
  reject: (err: Error) => void;
  command: Command;
}

export interface SessionEvents {
  onFrame?: (frame: FrameMessage) => void;
  onFlowFrame?: (frame: FrameMessage) => void;
  onStateChange?: (state: ConnectionState) => void;
  onWarning?: (message: string) => void;
}

export class SessionView {
  state: ConnectionState = "connecting";
  gridWidth = 0;
  gridHeight = 0;
  stepsPerFrame = 0;
  lastAckStep = -1;
  discardedFrames = 0;

  private nextId = 1;
  private pending = new Map<number, Pending>();
  private pendingResize: { width: number; height: number } | null = null;
  private frameTimes: number[] = [];
  private readonly clock: () => number;

  constructor(
    private transport: Transport,
    private events: SessionEvents = {},
    clock?: () => number,
  ) {
    this.clock = clock ?? (() => Date.now());
  }

  /** True once the hello record arrived; controls stay disabled before. */
  get ready(): boolean {
    return this.state === "ready";
  }

  get hasPendingResize(): boolean {
    return this.pendingResize !== null;
  }

  pendingCount(): number {
    return this.pending.size;
  }

  /** Frames rendered during the trailing one-second window. */
  fps(): number {
    const now = this.clock();
    while (this.frameTimes.length && now - this.frameTimes[0] > 1000) {
      this.frameTimes.shift();
    }
    return this.frameTimes.length;
  }

  handleMessage(msg: ServerMessage): void {
    if (msg.kind === "text") {
      this.handleText(msg);
    } else if (msg.kind === "flow") {
      this.events.onFlowFrame?.(msg);
    } else {
      this.handleFrame(msg);
    }
  }

  close(): void {
    this.state = "closed";
    for (const p of this.pending.values()) {
      p.reject(new Error("session closed"));
    }
    this.pending.clear();
    this.events.onStateChange?.("closed");
    this.transport.close();
  }

  private handleFrame(frame: FrameMessage): void {
    if (this.pendingResize !== null) {
      // everything in flight during a resize transition is stale
      this.discardedFrames += 1;
      return;
    }
    if (frame.width !== this.gridWidth || frame.height !== this.gridHeight) {
      if (this.gridWidth !== 0) {
        this.discardedFrames += 1;
        this.events.onWarning?.(
          `discarded ${frame.width}x${frame.height} frame (grid is ` +
            `${this.gridWidth}x${this.gridHeight})`,
        );
        return;
      }
      this.gridWidth = frame.width;
      this.gridHeight = frame.height;
    }
    this.frameTimes.push(this.clock());
    if (this.frameTimes.length > 600) this.frameTimes.shift();
    this.events.onFrame?.(frame);
  }

  private handleText(msg: TextRecord): void {
    if (msg.event === "hello") {
      this.gridWidth = msg.width ?? 0;
      this.gridHeight = msg.height ?? 0;
      this.stepsPerFrame = msg.t ?? 0;
      this.state = "ready";
      this.events.onStateChange?.("ready");
      return;
    }
    if (typeof msg.step === "number") {
      this.lastAckStep = Math.max(this.lastAckStep, msg.step);
    }
    if (typeof msg.id !== "number") {
      if (msg.ok === false) this.events.onWarning?.(msg.error ?? "server error");
      return;
    }
    const pending = this.pending.get(msg.id);
    if (!pending) {
      this.events.onWarning?.(`stray reply for id ${msg.id}`);
      return;
    }
    this.pending.delete(msg.id);
    if (msg.ok) {
      if (pending.command.cmd === "resize") {
        this.gridWidth = msg.width ?? this.gridWidth;
        this.gridHeight = msg.height ?? this.gridHeight;
        this.pendingResize = null;
      }
      if (pending.command.cmd === "set_speed" && typeof msg.t === "number") {
        this.stepsPerFrame = msg.t;
      }
      pending.resolve(msg);
    } else {
      if (pending.command.cmd === "resize") this.pendingResize = null;
      pending.reject(new Error(msg.error ?? "command failed"));
    }
  }

  /** Send a command; resolves with its single ack, rejects on error reply. */
  send(command: Command): Promise<TextRecord> {
    if (!this.ready) {
      return Promise.reject(new Error("session is not ready"));
    }
    if (command.cmd === "resize") {
      if (this.pendingResize !== null) {
        return Promise.reject(new Error("a resize is already in flight"));
      }
      this.pendingResize = { width: command.width, height: command.height };
    }
    const id = this.nextId++;
    const promise = new Promise<TextRecord>((resolve, reject) => {
      this.pending.set(id, { resolve, reject, command });
    });
    this.transport.sendCommand(
      new TextEncoder().encode(JSON.stringify({ ...command, id }) + "\n"),
    );
    return promise;
  }

  sendDirection(thetaRadians: number): Promise<TextRecord> {
    return this.send({ cmd: "set_direction", theta: thetaRadians });
  }

  sendSpeed(stepsPerFrame: number): Promise<TextRecord> {
    return this.send({ cmd: "set_speed", t: stepsPerFrame });
  }

  sendBrush(gridX: number, gridY: number, radius: number): Promise<TextRecord> {
    return this.send({ cmd: "brush", x: gridX, y: gridY, radius });
  }

  sendTransform(kind: "none" | "circular_from_right"): Promise<TextRecord> {
    return this.send({ cmd: "set_transform", kind });
  }

  sendResize(height: number, width: number): Promise<TextRecord> {
    return this.send({ cmd: "resize", height, width });
  }
}
