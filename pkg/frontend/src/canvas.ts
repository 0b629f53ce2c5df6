/**
 * Canvas blitting and the canvas <-> grid coordinate map.
 *
 * The mapping math is kept free of DOM types so it can be unit-tested; the
 * CanvasView wrapper owns the 2D context and an offscreen staging canvas
 * for nearest-neighbour upscaling.
 */

import { FrameMessage } from "./protocol.js";

export interface CoordMap {
  canvasWidth: number;
  canvasHeight: number;
  gridWidth: number;
  gridHeight: number;
}

/** Canvas pixel position -> grid cell coordinates (continuous). */
export function canvasToGrid(map: CoordMap, x: number, y: number): { x: number; y: number } {
  return {
    x: (x / map.canvasWidth) * map.gridWidth,
    y: (y / map.canvasHeight) * map.gridHeight,
  };
}

/** Grid cell coordinates -> canvas pixel position (cell center). */
export function gridToCanvas(map: CoordMap, gx: number, gy: number): { x: number; y: number } {
  return {
    x: (gx / map.gridWidth) * map.canvasWidth,
    y: (gy / map.gridHeight) * map.canvasHeight,
  };
}

export function rgbToImageDataBytes(frame: FrameMessage): Uint8ClampedArray<ArrayBuffer> {
  const n = frame.width * frame.height;
  const rgba = new Uint8ClampedArray(new ArrayBuffer(n * 4));
  for (let i = 0; i < n; i++) {
    rgba[i * 4] = frame.pixels[i * 3];
    rgba[i * 4 + 1] = frame.pixels[i * 3 + 1];
    rgba[i * 4 + 2] = frame.pixels[i * 3 + 2];
    rgba[i * 4 + 3] = 255;
  }
  return rgba;
}

export class CanvasView {
  private ctx: CanvasRenderingContext2D;
  private staging: HTMLCanvasElement;
  private overlayAlpha = 0.0;
  private lastFlow: FrameMessage | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
    this.ctx.imageSmoothingEnabled = false;
    this.staging = document.createElement("canvas");
  }

  coordMap(gridWidth: number, gridHeight: number): CoordMap {
    return {
      canvasWidth: this.canvas.clientWidth || this.canvas.width,
      canvasHeight: this.canvas.clientHeight || this.canvas.height,
      gridWidth,
      gridHeight,
    };
  }

  setFlowOverlayAlpha(alpha: number): void {
    this.overlayAlpha = alpha;
  }

  drawFlow(frame: FrameMessage): void {
    this.lastFlow = frame;
  }

  draw(frame: FrameMessage): void {
    if (this.staging.width !== frame.width || this.staging.height !== frame.height) {
      this.staging.width = frame.width;
      this.staging.height = frame.height;
    }
    const sctx = this.staging.getContext("2d");
    if (!sctx) return;
    sctx.putImageData(
      new ImageData(rgbToImageDataBytes(frame), frame.width, frame.height),
      0,
      0,
    );
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(this.staging, 0, 0, this.canvas.width, this.canvas.height);
    if (this.overlayAlpha > 0 && this.lastFlow) {
      const octx = this.staging.getContext("2d");
      if (octx && this.lastFlow.width === frame.width) {
        octx.putImageData(
          new ImageData(rgbToImageDataBytes(this.lastFlow), frame.width, frame.height),
          0,
          0,
        );
        this.ctx.globalAlpha = this.overlayAlpha;
        this.ctx.drawImage(this.staging, 0, 0, this.canvas.width, this.canvas.height);
        this.ctx.globalAlpha = 1.0;
      }
    }
  }
}
