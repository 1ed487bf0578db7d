/**
 * Per-channel mask layers. The Uint8Array raster is the single source of
 * truth at exact image resolution; the canvas overlay renders from it, so
 * what is exported is what is on screen.
 *
 * Mode derivation is a pure function of stroke provenance: any brush stroke
 * makes the layer free-form, rectangle-only layers are bounding-box, layers
 * with no set pixels are empty (conditioning codes 2 / 3 / 1 server-side).
 */

export type Tool = "brush" | "rect";
export type LayerMode = "empty" | "freeform" | "bbox";

export const CHANNEL_NAMES = [
  "normal tissue",
  "necrotic core",
  "edema",
  "enhancement",
  "merged tumor",
] as const;

export const CHANNEL_COLORS = ["#2e86de", "#e74c3c", "#f1c40f", "#9b59b6", "#27ae60"] as const;

export class MaskLayer {
  readonly channel: number;
  readonly width: number;
  readonly height: number;
  data: Uint8Array;
  visible = true;
  private strokes: Tool[] = [];

  constructor(channel: number, width: number, height: number) {
    this.channel = channel;
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height);
  }

  private stamp(cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) this.data[y * this.width + x] = value;
      }
    }
  }

  brushStroke(points: Array<{ x: number; y: number }>, radius: number): void {
    if (!points.length) return;
    let prev = points[0];
    this.stamp(prev.x, prev.y, radius, 1);
    for (const p of points.slice(1)) {
      const steps = Math.max(1, Math.ceil(Math.hypot(p.x - prev.x, p.y - prev.y)));
      for (let s = 1; s <= steps; s++) {
        this.stamp(prev.x + ((p.x - prev.x) * s) / steps, prev.y + ((p.y - prev.y) * s) / steps, radius, 1);
      }
      prev = p;
    }
    this.strokes.push("brush");
  }

  rectStroke(x0: number, y0: number, x1: number, y1: number): void {
    const xa = Math.max(0, Math.min(Math.round(x0), Math.round(x1)));
    const xb = Math.min(this.width - 1, Math.max(Math.round(x0), Math.round(x1)));
    const ya = Math.max(0, Math.min(Math.round(y0), Math.round(y1)));
    const yb = Math.min(this.height - 1, Math.max(Math.round(y0), Math.round(y1)));
    if (xa > xb || ya > yb) return;
    for (let y = ya; y <= yb; y++) {
      this.data.fill(1, y * this.width + xa, y * this.width + xb + 1);
    }
    this.strokes.push("rect");
  }

  erase(points: Array<{ x: number; y: number }>, radius: number): void {
    for (const p of points) this.stamp(p.x, p.y, radius, 0);
  }

  clear(): void {
    this.data.fill(0);
    this.strokes = [];
  }

  isEmpty(): boolean {
    return !this.data.some((v) => v !== 0);
  }

  /** Pure function of stroke provenance (and emptiness). */
  mode(): LayerMode {
    if (this.isEmpty()) return "empty";
    return this.strokes.includes("brush") ? "freeform" : "bbox";
  }

  pixelCount(): number {
    let n = 0;
    for (const v of this.data) if (v) n++;
    return n;
  }
}

export function makeLayers(width: number, height: number): MaskLayer[] {
  return [0, 1, 2, 3, 4].map((ch) => new MaskLayer(ch, width, height));
}
