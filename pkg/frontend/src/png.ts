/**
 * Minimal 8-bit grayscale PNG codec.
 *
 * Encode emits filter-0 scanlines; decode handles all five PNG filter types
 * so images written by other encoders (the inference service uses Pillow)
 * decode correctly. Compression uses the platform CompressionStream /
 * DecompressionStream ("deflate" = zlib), available in browsers and node.
 */

export interface GrayImage {
  width: number;
  height: number;
  data: Uint8Array; // row-major, one byte per pixel
}

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  return (c ^ 0xffffffff) >>> 0;
}

async function pipeThrough(
  data: Uint8Array,
  stream: CompressionStream | DecompressionStream,
): Promise<Uint8Array> {
  const writer = stream.writable.getWriter();
  const wrote = writer.write(data as unknown as BufferSource).catch(() => undefined);
  const closed = writer.close().catch(() => undefined);
  const reader = stream.readable.getReader();
  const parts: Uint8Array[] = [];
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    parts.push(value);
  }
  await wrote;
  await closed;
  const out = new Uint8Array(parts.reduce((n, p) => n + p.length, 0));
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function u32(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function chunk(type: string, payload: Uint8Array): Uint8Array {
  const typed = new Uint8Array(4 + payload.length);
  for (let i = 0; i < 4; i++) typed[i] = type.charCodeAt(i);
  typed.set(payload, 4);
  const out = new Uint8Array(4 + typed.length + 4);
  out.set(u32(payload.length), 0);
  out.set(typed, 4);
  out.set(u32(crc32(typed)), 4 + typed.length);
  return out;
}

export async function encodePng(image: GrayImage): Promise<Uint8Array> {
  const { width, height, data } = image;
  if (data.length !== width * height) {
    throw new Error(`pixel buffer is ${data.length} bytes, expected ${width * height}`);
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32(width), 0);
  ihdr.set(u32(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // grayscale
  // compression/filter/interlace all 0
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter: none
    raw.set(data.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  const idat = await pipeThrough(raw, new CompressionStream("deflate"));
  const parts = [
    new Uint8Array(SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", new Uint8Array(0)),
  ];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

export async function decodePng(bytes: Uint8Array): Promise<GrayImage> {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let off = 8;
  let width = 0;
  let height = 0;
  const idat: Uint8Array[] = [];
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  while (off < bytes.length) {
    const length = view.getUint32(off);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    const payload = bytes.subarray(off + 8, off + 8 + length);
    if (type === "IHDR") {
      const hv = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      const [depth, color, , , interlace] = [payload[8], payload[9], 0, 0, payload[12]];
      if (depth !== 8 || color !== 0) {
        throw new Error(`unsupported PNG: need 8-bit grayscale, got depth=${depth} color=${color}`);
      }
      if (interlace !== 0) throw new Error("interlaced PNG not supported");
    } else if (type === "IDAT") {
      idat.push(payload);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + length;
  }
  if (!width || !height) throw new Error("PNG missing IHDR");
  const compressed = new Uint8Array(idat.reduce((n, p) => n + p.length, 0));
  let ioff = 0;
  for (const p of idat) {
    compressed.set(p, ioff);
    ioff += p.length;
  }
  const raw = await pipeThrough(compressed, new DecompressionStream("deflate"));
  if (raw.length !== height * (width + 1)) {
    throw new Error(`decompressed size ${raw.length}, expected ${height * (width + 1)}`);
  }
  const data = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (width + 1)];
    const row = raw.subarray(y * (width + 1) + 1, (y + 1) * (width + 1));
    const out = data.subarray(y * width, (y + 1) * width);
    const prev = y > 0 ? data.subarray((y - 1) * width, y * width) : null;
    for (let x = 0; x < width; x++) {
      const a = x > 0 ? out[x - 1] : 0; // left
      const b = prev ? prev[x] : 0; // up
      const c = x > 0 && prev ? prev[x - 1] : 0; // up-left
      let v = row[x];
      switch (filter) {
        case 0:
          break;
        case 1:
          v += a;
          break;
        case 2:
          v += b;
          break;
        case 3:
          v += (a + b) >> 1;
          break;
        case 4:
          v += paeth(a, b, c);
          break;
        default:
          throw new Error(`unknown PNG filter ${filter} on row ${y}`);
      }
      out[x] = v & 0xff;
    }
  }
  return { width, height, data };
}

export function toBase64(bytes: Uint8Array): string {
  let binary = "";
  for (let i = 0; i < bytes.length; i += 0x8000) {
    binary += String.fromCharCode(...bytes.subarray(i, i + 0x8000));
  }
  return btoa(binary);
}

export function fromBase64(text: string): Uint8Array {
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}
