import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { decodePng, encodePng, fromBase64, GrayImage } from "../src/png.js";
import { DEFAULT_PARAMS, Session } from "../src/session.js";
import { startFixtureServer } from "./fixture_server.js";

let server: { url: string; close: () => Promise<void> };

beforeAll(async () => {
  server = await startFixtureServer();
});

afterAll(async () => {
  await server.close();
});

function testImage(size = 24): GrayImage {
  const data = new Uint8Array(size * size);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) data[y * size + x] = (x * 11 + y * 5) % 256;
  }
  return { width: size, height: size, data };
}

describe("session request encoding", () => {
  it("refuses to encode with every layer empty", async () => {
    const session = await Session.fromImage(testImage());
    expect(session.canSubmit()).toBe(false);
    await expect(session.encodeRequest()).rejects.toThrow(/at least one ROI/);
  });

  it("exports one mask per nonempty layer with provenance-derived modes", async () => {
    const session = await Session.fromImage(testImage());
    session.layers[0].brushStroke([{ x: 5, y: 5 }, { x: 9, y: 9 }], 2);
    session.layers[4].rectStroke(12, 12, 20, 18);
    const payload = await session.encodeRequest();
    expect(payload.mask_ch0).toBeDefined();
    expect(payload.mode_ch0).toBe("freeform");
    expect(payload.mask_ch4).toBeDefined();
    expect(payload.mode_ch4).toBe("bbox");
    expect(payload.mask_ch1).toBeUndefined();
    expect(payload.mode_ch1).toBeUndefined();

    // mask fidelity: the exported raster equals the layer raster exactly
    const decoded = await decodePng(fromBase64(payload.mask_ch0!));
    expect(decoded.width).toBe(24);
    const expected = session.layers[0].data.map((v) => (v ? 255 : 0));
    expect(decoded.data).toEqual(expected);
  });

  it("rectangle-drawn-then-brushed layer submits freeform", async () => {
    const session = await Session.fromImage(testImage());
    session.layers[2].rectStroke(2, 2, 8, 8);
    session.layers[2].brushStroke([{ x: 4, y: 4 }], 1);
    const payload = await session.encodeRequest();
    expect(payload.mode_ch2).toBe("freeform");
  });
});

describe("full loop against the fixture server", () => {
  it("draw -> submit -> render -> use-as-input, with seed-exact re-runs", async () => {
    const client = new ApiClient(server.url);
    const session = await Session.fromImage(testImage(), { ...DEFAULT_PARAMS, seed: 123 });
    session.layers[4].rectStroke(4, 4, 15, 15);
    session.layers[0].brushStroke([{ x: 20, y: 20 }, { x: 22, y: 21 }], 2);

    const first = await session.submit(client);
    expect(session.history).toHaveLength(1);
    expect(first.result.width).toBe(24);

    // context pixels unchanged, ROI pixels replaced
    const union = new Uint8Array(24 * 24);
    for (const layer of [session.layers[0], session.layers[4]]) {
      layer.data.forEach((v, i) => {
        if (v) union[i] = 1;
      });
    }
    let roiChanged = 0;
    for (let i = 0; i < union.length; i++) {
      if (union[i]) roiChanged += first.result.data[i] !== session.image.data[i] ? 1 : 0;
      else expect(first.result.data[i]).toBe(session.image.data[i]);
    }
    expect(roiChanged).toBeGreaterThan(0);

    // identical seed re-run renders a pixel-identical result
    const rerun = await session.resubmit(client, 0);
    expect(rerun.resultPng).toEqual(first.resultPng);
    expect(rerun.result.data).toEqual(first.result.data);

    // a different seed diverges in the ROI
    session.params.seed = 999;
    const other = await session.submit(client);
    expect(other.result.data).not.toEqual(first.result.data);

    // feeding a result back replaces the input and clears the layers
    session.useAsInput(0);
    expect(session.image.data).toEqual(first.result.data);
    expect(session.layers.every((l) => l.isEmpty())).toBe(true);
    expect(session.canSubmit()).toBe(false);
  });

  it("surfaces the service's field-level errors", async () => {
    const client = new ApiClient(server.url);
    const session = await Session.fromImage(testImage());
    session.layers[1].rectStroke(0, 0, 5, 5);
    const payload = await session.encodeRequest();
    // corrupt the request: mask for ch1 at the wrong resolution
    const wrong = await encodePng({ width: 8, height: 8, data: new Uint8Array(64).fill(255) });
    payload.mask_ch1 = Buffer.from(wrong).toString("base64");
    await expect(client.inpaint(payload)).rejects.toMatchObject({
      status: 400,
      field: "mask_ch1",
    } satisfies Partial<ApiError>);
  });

  it("health and checkpoint listing round-trip", async () => {
    const client = new ApiClient(server.url);
    const health = await client.health();
    expect(health.status).toBe("ok");
    const checkpoints = await client.checkpoints();
    expect(checkpoints[0].id).toBe("fixture");
  });
});
