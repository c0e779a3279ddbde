/**
 * Binary containers shared with the service: `.hsic` cubes and `.hsim`
 * masks. Layout: 8-byte magic "HSICUBE1", a little-endian uint32 header
 * length, a JSON header (sorted keys, no whitespace), then the payload as
 * little-endian values in pixel-major order.
 */

export const MAGIC = 'HSICUBE1';

export interface Cube {
  rows: number;
  cols: number;
  bands: number;
  /** pixel-major, length rows*cols*bands */
  data: Float64Array;
  wavelengths: number[] | null;
}

export interface Mask {
  rows: number;
  cols: number;
  /** one code per pixel: 0 unlabeled, 1 negative, >= 2 one positive bag per code */
  codes: Uint16Array;
}

export class FormatError extends Error {}

interface Header {
  rows: number;
  cols: number;
  bands: number;
  dtype: string;
  wavelengths?: number[];
}

const DTYPE_BYTES: Record<string, number> = { f32: 4, f64: 8, u16: 2, u32: 4 };

function readHeader(bytes: Uint8Array): { header: Header; payload: Uint8Array } {
  if (bytes.length < MAGIC.length + 4) {
    throw new FormatError('container shorter than the fixed header');
  }
  const magic = new TextDecoder().decode(bytes.subarray(0, MAGIC.length));
  if (magic !== MAGIC) {
    throw new FormatError(`bad magic ${JSON.stringify(magic)}`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const headerLen = view.getUint32(MAGIC.length, true);
  const start = MAGIC.length + 4;
  if (bytes.length < start + headerLen) {
    throw new FormatError('truncated header');
  }
  let header: unknown;
  try {
    header = JSON.parse(new TextDecoder().decode(bytes.subarray(start, start + headerLen)));
  } catch (err) {
    throw new FormatError(`malformed header: ${err}`);
  }
  if (typeof header !== 'object' || header === null || Array.isArray(header)) {
    throw new FormatError('header is not a JSON object');
  }
  const h = header as Header;
  for (const key of ['rows', 'cols', 'bands'] as const) {
    if (!Number.isInteger(h[key]) || h[key] <= 0) {
      throw new FormatError(`header field ${JSON.stringify(key)} missing or invalid`);
    }
  }
  return { header: h, payload: bytes.subarray(start + headerLen) };
}

function checkPayload(payload: Uint8Array, dtype: string, count: number): void {
  const expected = count * DTYPE_BYTES[dtype];
  if (payload.length !== expected) {
    throw new FormatError(`payload has ${payload.length} bytes, expected ${expected}`);
  }
}

/** Payload bytes are not required to be aligned, so copy through a DataView. */
function readFloats(payload: Uint8Array, dtype: 'f32' | 'f64', count: number): Float64Array {
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const out = new Float64Array(count);
  if (dtype === 'f32') {
    for (let i = 0; i < count; i++) out[i] = view.getFloat32(i * 4, true);
  } else {
    for (let i = 0; i < count; i++) out[i] = view.getFloat64(i * 8, true);
  }
  return out;
}

export function decodeCube(bytes: Uint8Array): Cube {
  const { header, payload } = readHeader(bytes);
  if (header.dtype !== 'f32' && header.dtype !== 'f64') {
    throw new FormatError(`cube dtype must be f32 or f64, got ${JSON.stringify(header.dtype)}`);
  }
  const count = header.rows * header.cols * header.bands;
  checkPayload(payload, header.dtype, count);
  return {
    rows: header.rows,
    cols: header.cols,
    bands: header.bands,
    data: readFloats(payload, header.dtype, count),
    wavelengths: header.wavelengths ?? null,
  };
}

export function decodeMask(bytes: Uint8Array): Mask {
  const { header, payload } = readHeader(bytes);
  if (header.bands !== 1) {
    throw new FormatError(`mask bands must be 1, got ${header.bands}`);
  }
  if (header.dtype !== 'u16') {
    throw new FormatError(`mask dtype must be u16, got ${JSON.stringify(header.dtype)}`);
  }
  const count = header.rows * header.cols;
  checkPayload(payload, 'u16', count);
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const codes = new Uint16Array(count);
  for (let i = 0; i < count; i++) codes[i] = view.getUint16(i * 2, true);
  return { rows: header.rows, cols: header.cols, codes };
}

/**
 * Encode a mask byte-identically to the service's own writer: the header
 * keys are emitted in sorted order and every value is an integer, so the
 * JSON text matches exactly.
 */
export function encodeMask(mask: Mask): Uint8Array {
  if (mask.codes.length !== mask.rows * mask.cols) {
    throw new FormatError(`mask has ${mask.codes.length} codes, expected ${mask.rows}*${mask.cols}`);
  }
  const header = JSON.stringify({ bands: 1, cols: mask.cols, dtype: 'u16', rows: mask.rows });
  const headerBytes = new TextEncoder().encode(header);
  const out = new Uint8Array(MAGIC.length + 4 + headerBytes.length + mask.codes.length * 2);
  out.set(new TextEncoder().encode(MAGIC), 0);
  const view = new DataView(out.buffer);
  view.setUint32(MAGIC.length, headerBytes.length, true);
  out.set(headerBytes, MAGIC.length + 4);
  const payloadStart = MAGIC.length + 4 + headerBytes.length;
  for (let i = 0; i < mask.codes.length; i++) {
    view.setUint16(payloadStart + i * 2, mask.codes[i], true);
  }
  return out;
}

/** Single-band cubes (target maps, influence heatmaps) as a flat value plane. */
export function decodePlane(bytes: Uint8Array): { rows: number; cols: number; values: Float64Array } {
  const cube = decodeCube(bytes);
  if (cube.bands !== 1) {
    throw new FormatError(`expected a single-band cube, got ${cube.bands} bands`);
  }
  return { rows: cube.rows, cols: cube.cols, values: cube.data };
}

/** Superpixel maps: one uint32 segment id per pixel. */
export function decodeSegments(bytes: Uint8Array): { rows: number; cols: number; segments: Uint32Array } {
  const { header, payload } = readHeader(bytes);
  if (header.bands !== 1) {
    throw new FormatError(`segment map bands must be 1, got ${header.bands}`);
  }
  if (header.dtype !== 'u32') {
    throw new FormatError(`segment map dtype must be u32, got ${JSON.stringify(header.dtype)}`);
  }
  const count = header.rows * header.cols;
  checkPayload(payload, 'u32', count);
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const segments = new Uint32Array(count);
  for (let i = 0; i < count; i++) segments[i] = view.getUint32(i * 4, true);
  return { rows: header.rows, cols: header.cols, segments };
}
