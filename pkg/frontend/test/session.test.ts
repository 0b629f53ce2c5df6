import { describe, expect, it } from "vitest";

import { FrameMessage, TextRecord } from "../src/protocol.js";
import { SessionView, Transport } from "../src/session.js";
import { canvasToGrid, gridToCanvas } from "../src/canvas.js";

class MockServer implements Transport {
  sent: Array<Record<string, unknown>> = [];
  closed = false;
  view!: SessionView;

  sendCommand(line: Uint8Array): void {
    this.sent.push(JSON.parse(new TextDecoder().decode(line)));
  }

  close(): void {
    this.closed = true;
  }

  hello(width = 16, height = 16, t = 4): void {
    this.view.handleMessage({
      kind: "text", ok: true, event: "hello", width, height, t, step: 0,
    } as TextRecord);
  }

  ack(extra: Partial<TextRecord> = {}): void {
    const last = this.sent[this.sent.length - 1];
    this.view.handleMessage({
      kind: "text", ok: true, id: last.id as number, cmd: last.cmd as string,
      step: 7, ...extra,
    } as TextRecord);
  }

  error(message: string): void {
    const last = this.sent[this.sent.length - 1];
    this.view.handleMessage({
      kind: "text", ok: false, id: last.id as number, error: message, step: 7,
    } as TextRecord);
  }

  frame(width = 16, height = 16): void {
    this.view.handleMessage({
      kind: "frame", width, height,
      pixels: new Uint8Array(width * height * 3),
    } as FrameMessage);
  }
}

function makeSession(clock?: () => number) {
  const server = new MockServer();
  const frames: FrameMessage[] = [];
  const warnings: string[] = [];
  const view = new SessionView(
    server,
    { onFrame: (f) => frames.push(f), onWarning: (w) => warnings.push(w) },
    clock,
  );
  server.view = view;
  return { server, view, frames, warnings };
}

describe("SessionView", () => {
  it("controls are unusable until the hello arrives", async () => {
    const { view, server } = makeSession();
    await expect(view.sendSpeed(8)).rejects.toThrow(/not ready/);
    server.hello();
    expect(view.ready).toBe(true);
    expect(view.gridWidth).toBe(16);
  });

  it("each command resolves with exactly one ack", async () => {
    const { view, server } = makeSession();
    server.hello();
    const p = view.sendDirection(Math.PI / 2);
    expect(view.pendingCount()).toBe(1);
    server.ack({ theta: Math.PI / 2 });
    const reply = await p;
    expect(reply.step).toBe(7);
    expect(view.pendingCount()).toBe(0);
    expect(view.lastAckStep).toBe(7);
  });

  it("error replies reject the pending promise", async () => {
    const { view, server } = makeSession();
    server.hello();
    const p = view.sendSpeed(0);
    server.error("t must be an integer >= 1");
    await expect(p).rejects.toThrow(/integer/);
    expect(view.pendingCount()).toBe(0);
  });

  it("brush command carries grid coordinates", async () => {
    const { view, server } = makeSession();
    server.hello(128, 128);
    const map = { canvasWidth: 512, canvasHeight: 512, gridWidth: 128, gridHeight: 128 };
    const g = canvasToGrid(map, 256, 128);
    const p = view.sendBrush(g.x, g.y, 8);
    expect(server.sent[0]).toMatchObject({ cmd: "brush", x: 64, y: 32, radius: 8 });
    server.ack();
    await p;
  });

  it("one resize in flight at a time; stale frames discarded", async () => {
    const { view, server, frames } = makeSession();
    server.hello(16, 16);
    server.frame(16, 16);
    expect(frames).toHaveLength(1);

    const p = view.sendResize(32, 32);
    await expect(view.sendResize(48, 48)).rejects.toThrow(/already in flight/);
    // frames with the stale size during the transition are dropped
    server.frame(16, 16);
    server.frame(16, 16);
    expect(frames).toHaveLength(1);
    expect(view.discardedFrames).toBe(2);
    server.ack({ width: 32, height: 32 });
    await p;
    expect(view.gridWidth).toBe(32);
    server.frame(32, 32);
    expect(frames).toHaveLength(2);
  });

  it("frames with unexpected size outside a resize raise a warning", () => {
    const { server, frames, warnings } = makeSession();
    server.hello(16, 16);
    server.frame(24, 24);
    expect(frames).toHaveLength(0);
    expect(warnings.length).toBe(1);
  });

  it("fps counter tracks the trailing second within one frame", () => {
    let now = 0;
    const { view, server } = makeSession(() => now);
    server.hello();
    // 10 fps stream for 3 seconds
    for (let i = 0; i < 30; i++) {
      now = i * 100;
      server.frame();
    }
    now = 2999;
    expect(Math.abs(view.fps() - 10)).toBeLessThanOrEqual(1);
  });

  it("close rejects all pending commands", async () => {
    const { view, server } = makeSession();
    server.hello();
    const p = view.sendSpeed(4);
    view.close();
    await expect(p).rejects.toThrow(/closed/);
    expect(server.closed).toBe(true);
  });
});

describe("coordinate mapping", () => {
  it("round-trips within one cell at several zoom levels", () => {
    for (const canvasSize of [128, 256, 512, 1000]) {
      const map = {
        canvasWidth: canvasSize,
        canvasHeight: canvasSize,
        gridWidth: 128,
        gridHeight: 96,
      };
      for (const [cx, cy] of [[0, 0], [canvasSize / 2, canvasSize / 3], [canvasSize - 1, canvasSize - 1]]) {
        const g = canvasToGrid(map, cx, cy);
        const back = gridToCanvas(map, g.x, g.y);
        const gg = canvasToGrid(map, back.x, back.y);
        expect(Math.abs(gg.x - g.x)).toBeLessThan(1);
        expect(Math.abs(gg.y - g.y)).toBeLessThan(1);
      }
    }
  });
});
