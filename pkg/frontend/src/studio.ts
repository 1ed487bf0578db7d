/**
 * DOM wiring for the mask-drawing studio. All mask state lives in the
 * Session's Uint8Array rasters (src/mask.ts); the canvases only render that
 * state, so the exported masks always equal what is on screen. Generation
 * happens exclusively server-side.
 */

import { ApiClient, ApiError } from "./api.js";
import { CHANNEL_COLORS, CHANNEL_NAMES } from "./mask.js";
import { GrayImage } from "./png.js";
import { DEFAULT_PARAMS, HistoryEntry, Session } from "./session.js";

const SCALE = 6;

type ToolName = "brush" | "rect" | "eraser";

class Studio {
  client = new ApiClient("");
  session: Session | null = null;
  tool: ToolName = "brush";
  channel = 4;
  brushRadius = 2;
  stroke: Array<{ x: number; y: number }> = [];
  rectStart: { x: number; y: number } | null = null;
  rectPreview: { x: number; y: number } | null = null;

  private readonly canvas = document.getElementById("draw") as HTMLCanvasElement;
  private readonly resultCanvas = document.getElementById("result") as HTMLCanvasElement;
  private readonly banner = document.getElementById("banner") as HTMLDivElement;
  private readonly submitBtn = document.getElementById("submit") as HTMLButtonElement;
  private readonly historyList = document.getElementById("history") as HTMLUListElement;
  private readonly echo = document.getElementById("echo") as HTMLDivElement;

  async start(): Promise<void> {
    this.buildChannelControls();
    this.bindTools();
    this.bindParams();
    this.bindPointer();
    await this.refreshCheckpoints();
    const upload = document.getElementById("upload") as HTMLInputElement;
    upload.addEventListener("change", async () => {
      const file = upload.files?.[0];
      if (!file) return;
      const bytes = new Uint8Array(await file.arrayBuffer());
      try {
        this.session = await Session.fromPng(bytes, this.readParams());
        this.note(`loaded ${file.name} (${this.session.image.width}x${this.session.image.height})`);
        this.redraw();
      } catch (err) {
        this.error(String(err));
      }
    });
    this.submitBtn.addEventListener("click", () => void this.submit());
    this.redraw();
  }

  private buildChannelControls(): void {
    const box = document.getElementById("channels")!;
    CHANNEL_NAMES.forEach((name, ch) => {
      const row = document.createElement("label");
      row.className = "channel-row";
      const radio = document.createElement("input");
      radio.type = "radio";
      radio.name = "channel";
      radio.checked = ch === this.channel;
      radio.addEventListener("change", () => (this.channel = ch));
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      swatch.style.background = CHANNEL_COLORS[ch];
      const eye = document.createElement("input");
      eye.type = "checkbox";
      eye.checked = true;
      eye.title = "visible";
      eye.addEventListener("change", () => {
        if (this.session) {
          this.session.layers[ch].visible = eye.checked;
          this.redraw();
        }
      });
      const clear = document.createElement("button");
      clear.textContent = "clear";
      clear.addEventListener("click", (e) => {
        e.preventDefault();
        this.session?.layers[ch].clear();
        this.redraw();
      });
      const mode = document.createElement("span");
      mode.className = "mode";
      mode.id = `mode-${ch}`;
      row.append(radio, swatch, `${ch}: ${name} `, eye, clear, mode);
      box.append(row);
    });
  }

  private bindTools(): void {
    for (const name of ["brush", "rect", "eraser"] as ToolName[]) {
      const el = document.getElementById(`tool-${name}`) as HTMLInputElement;
      el.addEventListener("change", () => (this.tool = name));
    }
    const size = document.getElementById("brush-size") as HTMLInputElement;
    size.addEventListener("input", () => (this.brushRadius = Number(size.value)));
  }

  private bindParams(): void {
    const weight = document.getElementById("weight") as HTMLInputElement;
    const weightOut = document.getElementById("weight-value")!;
    weight.addEventListener("input", () => (weightOut.textContent = weight.value));
  }

  private readParams() {
    const val = (id: string) => (document.getElementById(id) as HTMLInputElement).value;
    return {
      ...DEFAULT_PARAMS,
      weight: Number(val("weight")),
      sampler: val("sampler") as "ddpm" | "ddim",
      steps: Number(val("steps")),
      eta: Number(val("eta")),
      rule: val("rule") as "standard" | "paper",
      seed: Number(val("seed")),
      checkpoint: val("checkpoint") || undefined,
    };
  }

  private async refreshCheckpoints(): Promise<void> {
    const select = document.getElementById("checkpoint") as HTMLSelectElement;
    try {
      const entries = await this.client.checkpoints();
      select.innerHTML = "";
      for (const e of entries) {
        const opt = document.createElement("option");
        opt.value = e.id;
        opt.textContent = `${e.id} (step ${e.step}, ${e.image_size}px)`;
        select.append(opt);
      }
    } catch {
      this.note("service unreachable; load it with `dinp serve` and reload");
    }
  }

  private canvasPos(ev: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: (ev.clientX - rect.left) / (rect.width / this.canvas.width) / SCALE,
      y: (ev.clientY - rect.top) / (rect.height / this.canvas.height) / SCALE,
    };
  }

  private bindPointer(): void {
    this.canvas.addEventListener("pointerdown", (ev) => {
      if (!this.session || this.session.pending) return;
      this.canvas.setPointerCapture(ev.pointerId);
      const p = this.canvasPos(ev);
      if (this.tool === "rect") {
        this.rectStart = p;
        this.rectPreview = p;
      } else {
        this.stroke = [p];
        this.applyBrushPoint(p);
      }
    });
    this.canvas.addEventListener("pointermove", (ev) => {
      if (!this.session || this.session.pending) return;
      if (this.tool === "rect") {
        if (this.rectStart) {
          this.rectPreview = this.canvasPos(ev);
          this.redraw();
        }
        return;
      }
      if (this.stroke.length) {
        const p = this.canvasPos(ev);
        this.stroke.push(p);
        this.applyBrushPoint(p);
      }
    });
    const finish = (ev: PointerEvent) => {
      if (!this.session) return;
      if (this.tool === "rect" && this.rectStart) {
        const end = this.canvasPos(ev);
        this.session.layers[this.channel].rectStroke(
          this.rectStart.x, this.rectStart.y, end.x, end.y,
        );
        this.rectStart = null;
        this.rectPreview = null;
      }
      this.stroke = [];
      this.redraw();
    };
    this.canvas.addEventListener("pointerup", finish);
    this.canvas.addEventListener("pointercancel", finish);
  }

  private applyBrushPoint(p: { x: number; y: number }): void {
    const layer = this.session!.layers[this.channel];
    if (this.tool === "eraser") layer.erase([p], this.brushRadius);
    else layer.brushStroke([p], this.brushRadius);
    this.redraw();
  }

  private paintImage(canvas: HTMLCanvasElement, image: GrayImage): CanvasRenderingContext2D {
    canvas.width = image.width * SCALE;
    canvas.height = image.height * SCALE;
    const ctx = canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    const base = new OffscreenCanvas(image.width, image.height);
    const bctx = base.getContext("2d")!;
    const rgba = bctx.createImageData(image.width, image.height);
    for (let i = 0; i < image.data.length; i++) {
      rgba.data[4 * i] = rgba.data[4 * i + 1] = rgba.data[4 * i + 2] = image.data[i];
      rgba.data[4 * i + 3] = 255;
    }
    bctx.putImageData(rgba, 0, 0);
    ctx.drawImage(base, 0, 0, canvas.width, canvas.height);
    return ctx;
  }

  private overlayLayers(ctx: CanvasRenderingContext2D): void {
    if (!this.session) return;
    for (const layer of this.session.layers) {
      if (!layer.visible || layer.isEmpty()) continue;
      ctx.fillStyle = CHANNEL_COLORS[layer.channel] + "55";
      for (let y = 0; y < layer.height; y++) {
        for (let x = 0; x < layer.width; x++) {
          if (layer.data[y * layer.width + x]) {
            ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
          }
        }
      }
    }
    if (this.rectStart && this.rectPreview) {
      ctx.strokeStyle = CHANNEL_COLORS[this.channel];
      ctx.setLineDash([4, 4]);
      ctx.strokeRect(
        Math.min(this.rectStart.x, this.rectPreview.x) * SCALE,
        Math.min(this.rectStart.y, this.rectPreview.y) * SCALE,
        Math.abs(this.rectPreview.x - this.rectStart.x) * SCALE,
        Math.abs(this.rectPreview.y - this.rectStart.y) * SCALE,
      );
      ctx.setLineDash([]);
    }
  }

  private outlineRois(ctx: CanvasRenderingContext2D): void {
    if (!this.session) return;
    for (const layer of this.session.layers) {
      if (layer.isEmpty()) continue;
      ctx.strokeStyle = CHANNEL_COLORS[layer.channel];
      ctx.lineWidth = 1.5;
      for (let y = 0; y < layer.height; y++) {
        for (let x = 0; x < layer.width; x++) {
          if (!layer.data[y * layer.width + x]) continue;
          const left = x === 0 || !layer.data[y * layer.width + x - 1];
          const right = x === layer.width - 1 || !layer.data[y * layer.width + x + 1];
          const up = y === 0 || !layer.data[(y - 1) * layer.width + x];
          const down = y === layer.height - 1 || !layer.data[(y + 1) * layer.width + x];
          if (left) this.line(ctx, x, y, x, y + 1);
          if (right) this.line(ctx, x + 1, y, x + 1, y + 1);
          if (up) this.line(ctx, x, y, x + 1, y);
          if (down) this.line(ctx, x, y + 1, x + 1, y + 1);
        }
      }
    }
  }

  private line(ctx: CanvasRenderingContext2D, x0: number, y0: number, x1: number, y1: number) {
    ctx.beginPath();
    ctx.moveTo(x0 * SCALE, y0 * SCALE);
    ctx.lineTo(x1 * SCALE, y1 * SCALE);
    ctx.stroke();
  }

  redraw(): void {
    if (this.session) {
      const ctx = this.paintImage(this.canvas, this.session.image);
      this.overlayLayers(ctx);
      this.session.layers.forEach((layer, ch) => {
        const el = document.getElementById(`mode-${ch}`);
        if (el) el.textContent = layer.mode();
      });
    }
    this.submitBtn.disabled = !this.session || !this.session.canSubmit();
    const hint = document.getElementById("submit-hint")!;
    if (!this.session) hint.textContent = "upload a slice to begin";
    else if (this.session.pending) hint.textContent = "request in flight...";
    else if (!this.session.nonEmptyLayers().length) hint.textContent = "draw at least one ROI";
    else hint.textContent = "";
  }

  private renderResult(entry: HistoryEntry): void {
    const ctx = this.paintImage(this.resultCanvas, entry.result);
    this.outlineRois(ctx);
    this.echo.textContent =
      `sampler=${entry.params.sampler} steps=${entry.params.steps} ` +
      `eta=${entry.params.eta} W=${entry.params.weight} rule=${entry.params.rule} ` +
      `seed=${entry.params.seed} (${entry.durationMs.toFixed(0)} ms)`;
  }

  private appendHistory(entry: HistoryEntry, index: number): void {
    const li = document.createElement("li");
    li.textContent = `#${index} seed=${entry.params.seed} W=${entry.params.weight} `;
    const show = document.createElement("button");
    show.textContent = "show";
    show.addEventListener("click", () => this.renderResult(entry));
    const rerun = document.createElement("button");
    rerun.textContent = "re-run";
    rerun.addEventListener("click", () => void this.rerun(index));
    const use = document.createElement("button");
    use.textContent = "use as input";
    use.addEventListener("click", () => {
      this.session?.useAsInput(index);
      this.note("result is now the input; layers cleared");
      this.redraw();
    });
    li.append(show, rerun, use);
    this.historyList.append(li);
  }

  private async submit(): Promise<void> {
    if (!this.session) return;
    this.session.params = this.readParams();
    this.banner.textContent = "";
    this.redraw();
    try {
      const entry = await this.session.submit(this.client);
      this.renderResult(entry);
      this.appendHistory(entry, this.session.history.length - 1);
    } catch (err) {
      this.error(err instanceof ApiError && err.field ? `${err.field}: ${err.message}` : String(err));
    } finally {
      this.redraw();
    }
  }

  private async rerun(index: number): Promise<void> {
    if (!this.session) return;
    try {
      const entry = await this.session.resubmit(this.client, index);
      this.renderResult(entry);
      this.appendHistory(entry, this.session.history.length - 1);
    } catch (err) {
      this.error(String(err));
    } finally {
      this.redraw();
    }
  }

  private note(text: string): void {
    this.banner.className = "note";
    this.banner.textContent = text;
  }

  private error(text: string): void {
    this.banner.className = "error";
    this.banner.textContent = text;
  }
}

void new Studio().start();
