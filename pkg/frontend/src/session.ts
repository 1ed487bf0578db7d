/**
 * Session state: the current input image, five mask layers, the parameter
 * panel, and the result history. The client never mutates image pixels;
 * every generated pixel comes back from the service.
 */

import { ApiClient, InpaintPayload, InpaintResponse } from "./api.js";
import { makeLayers, MaskLayer } from "./mask.js";
import { decodePng, encodePng, fromBase64, GrayImage, toBase64 } from "./png.js";

export interface Params {
  weight: number;
  sampler: "ddpm" | "ddim";
  steps: number;
  eta: number;
  rule: "standard" | "paper";
  seed: number;
  checkpoint?: string;
}

export const DEFAULT_PARAMS: Params = {
  weight: 0.4,
  sampler: "ddim",
  steps: 50,
  eta: 0,
  rule: "standard",
  seed: 0,
};

export interface HistoryEntry {
  params: Params;
  payload: InpaintPayload;
  resultPng: Uint8Array;
  result: GrayImage;
  durationMs: number;
}

export class Session {
  image: GrayImage;
  imagePng: Uint8Array;
  layers: MaskLayer[];
  params: Params;
  history: HistoryEntry[] = [];
  pending = false;

  private constructor(image: GrayImage, png: Uint8Array, params: Params) {
    this.image = image;
    this.imagePng = png;
    this.layers = makeLayers(image.width, image.height);
    this.params = { ...params };
  }

  static async fromPng(png: Uint8Array, params: Params = DEFAULT_PARAMS): Promise<Session> {
    return new Session(await decodePng(png), png, params);
  }

  static async fromImage(image: GrayImage, params: Params = DEFAULT_PARAMS): Promise<Session> {
    return new Session(image, await encodePng(image), params);
  }

  nonEmptyLayers(): MaskLayer[] {
    return this.layers.filter((l) => !l.isEmpty());
  }

  canSubmit(): boolean {
    return !this.pending && this.nonEmptyLayers().length > 0;
  }

  /** Masks exported as base64 PNG at exact image resolution, modes derived
   * from stroke provenance. Throws when every layer is empty. */
  async encodeRequest(): Promise<InpaintPayload> {
    const active = this.nonEmptyLayers();
    if (active.length === 0) throw new Error("draw at least one ROI before submitting");
    const payload: InpaintPayload = {
      image: toBase64(this.imagePng),
      weight: this.params.weight,
      sampler: this.params.sampler,
      steps: this.params.steps,
      eta: this.params.eta,
      rule: this.params.rule,
      seed: this.params.seed,
    };
    if (this.params.checkpoint) payload.checkpoint = this.params.checkpoint;
    const extras = payload as unknown as Record<string, unknown>;
    for (const layer of active) {
      const mask: GrayImage = {
        width: layer.width,
        height: layer.height,
        data: layer.data.map((v) => (v ? 255 : 0)),
      };
      extras[`mask_ch${layer.channel}`] = toBase64(await encodePng(mask));
      extras[`mode_ch${layer.channel}`] = layer.mode();
    }
    return payload;
  }

  async submit(client: ApiClient): Promise<HistoryEntry> {
    const payload = await this.encodeRequest();
    this.pending = true;
    try {
      const response: InpaintResponse = await client.inpaint(payload);
      const resultPng = fromBase64(response.image);
      const entry: HistoryEntry = {
        params: { ...this.params },
        payload,
        resultPng,
        result: await decodePng(resultPng),
        durationMs: response.duration_ms,
      };
      this.history.push(entry);
      return entry;
    } finally {
      this.pending = false;
    }
  }

  /** Re-run a history entry exactly (same payload, same seed). */
  async resubmit(client: ApiClient, index: number): Promise<HistoryEntry> {
    const entry = this.history[index];
    if (!entry) throw new Error(`no history entry ${index}`);
    this.pending = true;
    try {
      const response = await client.inpaint(entry.payload);
      const resultPng = fromBase64(response.image);
      const rerun: HistoryEntry = {
        params: { ...entry.params },
        payload: entry.payload,
        resultPng,
        result: await decodePng(resultPng),
        durationMs: response.duration_ms,
      };
      this.history.push(rerun);
      return rerun;
    } finally {
      this.pending = false;
    }
  }

  /** Replace the input image with a previous result and clear the layers. */
  useAsInput(index: number): void {
    const entry = this.history[index];
    if (!entry) throw new Error(`no history entry ${index}`);
    this.image = entry.result;
    this.imagePng = entry.resultPng;
    for (const layer of this.layers) layer.clear();
  }
}
