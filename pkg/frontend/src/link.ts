/**
 * Transports carrying the byte protocol.
 *
 * Browsers cannot open raw TCP, so the studio page talks WebSocket to the
 * bundled bridge (bridge.mjs), which pipes bytes to the session server
 * verbatim: binary ws messages are server->client stream chunks, text ws
 * messages are client->server command lines.  Test code and terminal
 * tooling under node connect straight over TCP.
 */

import { ServerMessage, StreamParser } from "./protocol.js";
import { Transport } from "./session.js";

export interface LinkEvents {
  onMessage: (msg: ServerMessage) => void;
  onClose?: () => void;
}

export class WsLink implements Transport {
  private ws: WebSocket;
  private parser = new StreamParser();

  constructor(url: string, private events: LinkEvents) {
    this.ws = new WebSocket(url);
    this.ws.binaryType = "arraybuffer";
    this.ws.onmessage = (ev: MessageEvent) => {
      if (typeof ev.data === "string") return;
      for (const msg of this.parser.push(new Uint8Array(ev.data as ArrayBuffer))) {
        this.events.onMessage(msg);
      }
    };
    this.ws.onclose = () => this.events.onClose?.();
  }

  sendCommand(line: Uint8Array): void {
    this.ws.send(new TextDecoder().decode(line));
  }

  close(): void {
    this.ws.close();
  }
}

/** Raw TCP transport for node (tests, terminal tooling). */
export class TcpLink implements Transport {
  private parser = new StreamParser();
  private socket: import("node:net").Socket | null = null;
  private queue: Uint8Array[] = [];

  private constructor() {}

  static async connect(host: string, port: number, events: LinkEvents): Promise<TcpLink> {
    const net = await import("node:net");
    const link = new TcpLink();
    await new Promise<void>((resolve, reject) => {
      const socket = net.createConnection({ host, port }, () => {
        socket.setNoDelay(true);
        link.socket = socket;
        for (const chunk of link.queue) socket.write(chunk);
        link.queue = [];
        resolve();
      });
      socket.on("data", (data: Buffer) => {
        for (const msg of link.parser.push(new Uint8Array(data))) {
          events.onMessage(msg);
        }
      });
      socket.on("error", reject);
      socket.on("close", () => events.onClose?.());
    });
    return link;
  }

  sendCommand(line: Uint8Array): void {
    if (this.socket) {
      this.socket.write(line);
    } else {
      this.queue.push(line);
    }
  }

  close(): void {
    this.socket?.destroy();
  }
}
