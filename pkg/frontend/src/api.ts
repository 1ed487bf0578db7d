/** Typed client for the inference service's HTTP/JSON API. */

export interface InpaintPayload {
  image: string;
  mask_ch0?: string;
  mask_ch1?: string;
  mask_ch2?: string;
  mask_ch3?: string;
  mask_ch4?: string;
  mode_ch0?: "empty" | "freeform" | "bbox";
  mode_ch1?: "empty" | "freeform" | "bbox";
  mode_ch2?: "empty" | "freeform" | "bbox";
  mode_ch3?: "empty" | "freeform" | "bbox";
  mode_ch4?: "empty" | "freeform" | "bbox";
  weight: number;
  sampler: "ddpm" | "ddim";
  steps: number;
  eta: number;
  rule: "standard" | "paper";
  seed: number;
  checkpoint?: string;
}

export interface InpaintResponse {
  image: string;
  steps: number;
  duration_ms: number;
  parameters: Record<string, unknown>;
}

export interface CheckpointInfo {
  id: string;
  step: number;
  image_size: number;
  schedule_T: number;
}

export class ApiError extends Error {
  status: number;
  field?: string;

  constructor(status: number, message: string, field?: string) {
    super(message);
    this.status = status;
    this.field = field;
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  baseUrl: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl: FetchLike = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl;
  }

  private async parseError(res: Response): Promise<never> {
    let message = `${res.status} ${res.statusText}`;
    let field: string | undefined;
    try {
      const body = await res.json();
      const detail = body.detail;
      if (typeof detail === "string") message = detail;
      else if (detail && typeof detail === "object") {
        message = detail.message ?? JSON.stringify(detail);
        field = detail.field;
      }
    } catch {
      /* keep the status-line message */
    }
    throw new ApiError(res.status, message, field);
  }

  async inpaint(payload: InpaintPayload): Promise<InpaintResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/v1/inpaint`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!res.ok) await this.parseError(res);
    return res.json();
  }

  async health(): Promise<{ status: string; ready: boolean; version: string }> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/v1/health`);
    if (!res.ok) await this.parseError(res);
    return res.json();
  }

  async checkpoints(): Promise<CheckpointInfo[]> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/v1/checkpoints`);
    if (!res.ok) await this.parseError(res);
    return (await res.json()).checkpoints;
  }
}
