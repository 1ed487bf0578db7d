/**
 * Deterministic stand-in for the inference service, used by the tests.
 * Validates payloads like the real server (dimension and mode-consistency
 * checks with field-level errors) and "inpaints" ROI pixels with a PRNG
 * keyed by the seed, so identical seeds return identical bytes.
 */

import http from "node:http";
import { AddressInfo } from "node:net";

import { decodePng, encodePng, fromBase64, toBase64 } from "../src/png.js";

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

async function handleInpaint(body: string): Promise<{ status: number; body: unknown }> {
  const payload = JSON.parse(body);
  const image = await decodePng(fromBase64(payload.image));
  const union = new Uint8Array(image.width * image.height);
  let any = false;
  for (let ch = 0; ch < 5; ch++) {
    const raw = payload[`mask_ch${ch}`];
    const mode = payload[`mode_ch${ch}`] ?? "empty";
    if (!raw) {
      if (mode !== "empty") {
        return {
          status: 400,
          body: { detail: { field: `mode_ch${ch}`, message: "mode without mask" } },
        };
      }
      continue;
    }
    if (mode === "empty") {
      return {
        status: 400,
        body: { detail: { field: `mode_ch${ch}`, message: "mask with empty mode" } },
      };
    }
    const mask = await decodePng(fromBase64(raw));
    if (mask.width !== image.width || mask.height !== image.height) {
      return {
        status: 400,
        body: { detail: { field: `mask_ch${ch}`, message: "mask dimensions mismatch" } },
      };
    }
    for (let i = 0; i < union.length; i++) {
      if (mask.data[i] === 255) {
        union[i] = 1;
        any = true;
      }
    }
  }
  if (!any) return { status: 422, body: { detail: "union of ROI channels is empty" } };

  const rng = mulberry32((payload.seed ?? 0) + 1);
  const out = new Uint8Array(image.data);
  for (let i = 0; i < out.length; i++) {
    if (union[i]) out[i] = Math.floor(rng() * 256);
  }
  const png = await encodePng({ width: image.width, height: image.height, data: out });
  return {
    status: 200,
    body: {
      image: toBase64(png),
      steps: payload.steps ?? 50,
      duration_ms: 1.0,
      parameters: { seed: payload.seed ?? 0, weight: payload.weight ?? 0.4 },
    },
  };
}

export async function startFixtureServer(): Promise<{ url: string; close: () => Promise<void> }> {
  const server = http.createServer((req, res) => {
    const send = (status: number, body: unknown) => {
      res.writeHead(status, { "Content-Type": "application/json" });
      res.end(JSON.stringify(body));
    };
    if (req.method === "GET" && req.url === "/api/v1/health") {
      send(200, { status: "ok", version: "fixture", ready: true });
      return;
    }
    if (req.method === "GET" && req.url === "/api/v1/checkpoints") {
      send(200, { checkpoints: [{ id: "fixture", step: 0, image_size: 32, schedule_T: 20 }] });
      return;
    }
    if (req.method === "POST" && req.url === "/api/v1/inpaint") {
      let body = "";
      req.on("data", (c) => (body += c));
      req.on("end", () => {
        handleInpaint(body)
          .then(({ status, body }) => send(status, body))
          .catch((err) => send(500, { detail: String(err) }));
      });
      return;
    }
    send(404, { detail: "not found" });
  });
  await new Promise<void>((resolve) => server.listen(0, "127.0.0.1", resolve));
  const { port } = server.address() as AddressInfo;
  return {
    url: `http://127.0.0.1:${port}`,
    close: () => new Promise((resolve) => server.close(() => resolve())),
  };
}
