/**
 * Browser studio: live canvas, direction dial, speed slider, resolution
 * control, brush, local-transform selector, weight-file picker, and the
 * flow overlay toggle.  Pure client of the session protocol; all state
 * lives on the server.
 */

import { CanvasView, canvasToGrid } from "./canvas.js";
import { WsLink } from "./link.js";
import { SessionView } from "./session.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string): void {
  el<HTMLSpanElement>("status").textContent = text;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const view = new CanvasView(canvas);
  const fpsLabel = el<HTMLSpanElement>("fps");
  const stepLabel = el<HTMLSpanElement>("step");
  const controls = Array.from(
    document.querySelectorAll<HTMLInputElement | HTMLSelectElement | HTMLButtonElement>(
      "[data-control]",
    ),
  );

  const setControlsEnabled = (enabled: boolean) => {
    for (const c of controls) c.disabled = !enabled;
  };
  setControlsEnabled(false);

  const url = new URLSearchParams(location.search).get("bridge") ?? "ws://127.0.0.1:7801";
  let session: SessionView;
  const link = new WsLink(url, {
    onMessage: (msg) => session.handleMessage(msg),
    onClose: () => {
      setStatus("disconnected");
      setControlsEnabled(false);
    },
  });
  session = new SessionView(link, {
    onFrame: (frame) => {
      view.draw(frame);
      fpsLabel.textContent = String(session.fps());
    },
    onFlowFrame: (frame) => view.drawFlow(frame),
    onStateChange: (state) => {
      setStatus(state);
      setControlsEnabled(state === "ready");
    },
    onWarning: (message) => toast(message),
  });

  function toast(message: string): void {
    const box = el<HTMLDivElement>("toast");
    box.textContent = message;
    box.style.opacity = "1";
    setTimeout(() => (box.style.opacity = "0"), 2500);
  }

  /** Disable one widget until its command is acked; roll back on error. */
  function guarded<T extends HTMLInputElement | HTMLSelectElement>(
    widget: T,
    run: () => Promise<unknown>,
    rollback: () => void,
  ): void {
    widget.disabled = true;
    run()
      .then((reply) => {
        const step = (reply as { step?: number }).step;
        if (typeof step === "number") stepLabel.textContent = String(step);
      })
      .catch((err) => {
        toast(String(err.message ?? err));
        rollback();
      })
      .finally(() => {
        widget.disabled = !session.ready;
      });
  }

  const dial = el<HTMLInputElement>("direction");
  let lastDial = dial.value;
  dial.addEventListener("change", () => {
    const degrees = Number(dial.value);
    const prev = lastDial;
    guarded(dial, () => session.sendDirection((degrees * Math.PI) / 180), () => {
      dial.value = prev;
    });
    lastDial = dial.value;
  });

  const speed = el<HTMLInputElement>("speed");
  let lastSpeed = speed.value;
  speed.addEventListener("change", () => {
    const prev = lastSpeed;
    guarded(speed, () => session.sendSpeed(Number(speed.value)), () => {
      speed.value = prev;
    });
    lastSpeed = speed.value;
  });

  const brushRadius = el<HTMLInputElement>("brush-radius");
  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const map = {
      canvasWidth: rect.width,
      canvasHeight: rect.height,
      gridWidth: session.gridWidth,
      gridHeight: session.gridHeight,
    };
    const g = canvasToGrid(map, ev.clientX - rect.left, ev.clientY - rect.top);
    session
      .sendBrush(g.x, g.y, Number(brushRadius.value))
      .catch((err) => toast(String(err.message ?? err)));
  });

  const transform = el<HTMLSelectElement>("transform");
  let lastTransform = transform.value;
  transform.addEventListener("change", () => {
    const prev = lastTransform;
    guarded(
      transform,
      () => session.sendTransform(transform.value as "none" | "circular_from_right"),
      () => {
        transform.value = prev;
      },
    );
    lastTransform = transform.value;
  });

  const resolution = el<HTMLSelectElement>("resolution");
  let lastResolution = resolution.value;
  resolution.addEventListener("change", () => {
    const size = Number(resolution.value);
    const prev = lastResolution;
    guarded(resolution, () => session.sendResize(size, size), () => {
      resolution.value = prev;
    });
    lastResolution = resolution.value;
  });

  el<HTMLInputElement>("weights").addEventListener("change", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.value) {
      session
        .send({ cmd: "load_weights", path: input.value })
        .catch((err) => toast(String(err.message ?? err)));
    }
  });

  const overlay = el<HTMLInputElement>("flow-overlay");
  overlay.addEventListener("change", () => {
    view.setFlowOverlayAlpha(overlay.checked ? 0.6 : 0.0);
    session
      .send({ cmd: "set_flow_overlay", enabled: overlay.checked })
      .catch((err) => toast(String(err.message ?? err)));
  });
}

window.addEventListener("DOMContentLoaded", main);
