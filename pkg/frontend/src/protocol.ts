/**
 * Wire codec for the streaming session protocol.
 *
 * Server -> client is a tagged byte stream:
 *   0x01  frame:        u16 width, u16 height (LE), width*height*3 RGB8 bytes
 *   0x02  text record:  u32 length (LE), UTF-8 JSON (hello / acks / errors)
 *   0x03  flow overlay frame, same layout as 0x01
 *
 * Client -> server is newline-delimited JSON commands.
 */

export const TAG_FRAME = 0x01;
export const TAG_TEXT = 0x02;
export const TAG_FLOW = 0x03;

export interface FrameMessage {
  kind: "frame" | "flow";
  width: number;
  height: number;
  /** RGB8, row-major, width*height*3 bytes */
  pixels: Uint8Array;
}

export interface TextRecord {
  kind: "text";
  ok: boolean;
  id?: number;
  step?: number;
  cmd?: string;
  event?: string;
  error?: string;
  width?: number;
  height?: number;
  t?: number;
  [key: string]: unknown;
}

export type ServerMessage = FrameMessage | TextRecord;

export type Command =
  | { cmd: "set_direction"; theta: number }
  | { cmd: "set_speed"; t: number }
  | { cmd: "brush"; x: number; y: number; radius: number }
  | { cmd: "set_transform"; kind: "none" | "circular_from_right" }
  | { cmd: "resize"; height: number; width: number }
  | { cmd: "load_weights"; path: string }
  | { cmd: "set_flow_overlay"; enabled: boolean };

export function encodeCommand(command: Command & { id?: number }): Uint8Array {
  return new TextEncoder().encode(JSON.stringify(command) + "\n");
}

/** Incremental parser over arbitrary chunk boundaries. */
export class StreamParser {
  private buffer = new Uint8Array(0);

  push(chunk: Uint8Array): ServerMessage[] {
    const joined = new Uint8Array(this.buffer.length + chunk.length);
    joined.set(this.buffer, 0);
    joined.set(chunk, this.buffer.length);
    this.buffer = joined;

    const out: ServerMessage[] = [];
    for (;;) {
      const msg = this.tryParseOne();
      if (msg === null) break;
      out.push(msg);
    }
    return out;
  }

  private tryParseOne(): ServerMessage | null {
    const buf = this.buffer;
    if (buf.length < 1) return null;
    const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
    const tag = buf[0];

    if (tag === TAG_FRAME || tag === TAG_FLOW) {
      if (buf.length < 5) return null;
      const width = view.getUint16(1, true);
      const height = view.getUint16(3, true);
      const total = 5 + width * height * 3;
      if (buf.length < total) return null;
      const pixels = buf.slice(5, total);
      this.buffer = buf.slice(total);
      return { kind: tag === TAG_FLOW ? "flow" : "frame", width, height, pixels };
    }

    if (tag === TAG_TEXT) {
      if (buf.length < 5) return null;
      const length = view.getUint32(1, true);
      const total = 5 + length;
      if (buf.length < total) return null;
      const body = new TextDecoder().decode(buf.slice(5, total));
      this.buffer = buf.slice(total);
      const parsed = JSON.parse(body) as Omit<TextRecord, "kind">;
      return { kind: "text", ...parsed } as TextRecord;
    }

    throw new Error(`unknown stream tag 0x${tag.toString(16)}`);
  }
}
