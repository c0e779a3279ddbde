import { createHash } from 'node:crypto';
import { describe, expect, it } from 'vitest';

import { FormatError, MAGIC, decodeCube, decodeMask, decodeSegments, encodeMask } from '../src/container';
import type { Mask } from '../src/container';

// sha256 of the same 3x4 mask written by the service-side encoder; byte
// equality here proves both ends emit the identical container.
const GOLDEN_MASK_SHA256 = '1a9a42b54e8c0897f8dbcc93ed8eb4ccf71eb70360bd89f5e4784a597238b389';

function goldenMask(): Mask {
  return {
    rows: 3,
    cols: 4,
    codes: new Uint16Array([1, 1, 0, 0, 2, 2, 1, 1, 1, 0, 3, 3]),
  };
}

function buildContainer(header: object, payload: Uint8Array): Uint8Array {
  const headerBytes = new TextEncoder().encode(JSON.stringify(header));
  const out = new Uint8Array(8 + 4 + headerBytes.length + payload.length);
  out.set(new TextEncoder().encode(MAGIC), 0);
  new DataView(out.buffer).setUint32(8, headerBytes.length, true);
  out.set(headerBytes, 12);
  out.set(payload, 12 + headerBytes.length);
  return out;
}

describe('mask codec', () => {
  it('encodes byte-identically to the service writer', () => {
    const digest = createHash('sha256').update(encodeMask(goldenMask())).digest('hex');
    expect(digest).toBe(GOLDEN_MASK_SHA256);
  });

  it('round-trips codes exactly', () => {
    const mask = goldenMask();
    const back = decodeMask(encodeMask(mask));
    expect(back.rows).toBe(3);
    expect(back.cols).toBe(4);
    expect(Array.from(back.codes)).toEqual(Array.from(mask.codes));
  });

  it('rejects a code count that disagrees with the grid', () => {
    expect(() => encodeMask({ rows: 2, cols: 2, codes: new Uint16Array(3) })).toThrow(FormatError);
  });
});

describe('cube decoding', () => {
  it('reads f64 payloads with wavelengths', () => {
    const values = new Float64Array([0.5, 1.25, -3, 8, 0, 2.5]);
    const bytes = buildContainer(
      { rows: 1, cols: 3, bands: 2, dtype: 'f64', wavelengths: [450, 550] },
      new Uint8Array(values.buffer.slice(0)),
    );
    const cube = decodeCube(bytes);
    expect(cube.rows).toBe(1);
    expect(cube.cols).toBe(3);
    expect(cube.bands).toBe(2);
    expect(Array.from(cube.data)).toEqual(Array.from(values));
    expect(cube.wavelengths).toEqual([450, 550]);
  });

  it('reads f32 payloads', () => {
    const values = new Float32Array([1.5, -0.25]);
    const bytes = buildContainer(
      { rows: 1, cols: 1, bands: 2, dtype: 'f32' },
      new Uint8Array(values.buffer.slice(0)),
    );
    const cube = decodeCube(bytes);
    expect(Array.from(cube.data)).toEqual([1.5, -0.25]);
    expect(cube.wavelengths).toBeNull();
  });

  it('reads unaligned payloads through the header correctly', () => {
    // a 13-byte header keeps the f64 payload off 8-byte alignment
    const values = new Float64Array([7.5]);
    const header = { rows: 1, cols: 1, bands: 1, dtype: 'f64', note: 'x' };
    const bytes = buildContainer(header, new Uint8Array(values.buffer.slice(0)));
    expect(decodeCube(bytes).data[0]).toBe(7.5);
  });

  it('rejects bad magic', () => {
    const bytes = encodeMask(goldenMask());
    bytes[0] = 0x58;
    expect(() => decodeMask(bytes)).toThrow(/bad magic/);
  });

  it('rejects truncated headers', () => {
    const bytes = encodeMask(goldenMask()).subarray(0, 14);
    expect(() => decodeMask(bytes)).toThrow(/truncated header/);
  });

  it('rejects payload size mismatches', () => {
    const bytes = buildContainer({ rows: 2, cols: 2, bands: 1, dtype: 'f64' }, new Uint8Array(8));
    expect(() => decodeCube(bytes)).toThrow(/payload has 8 bytes/);
  });

  it('rejects wrong dtypes per container kind', () => {
    const u16 = buildContainer({ rows: 1, cols: 1, bands: 1, dtype: 'u16' }, new Uint8Array(2));
    expect(() => decodeCube(u16)).toThrow(/cube dtype/);
    const f64 = buildContainer({ rows: 1, cols: 1, bands: 1, dtype: 'f64' }, new Uint8Array(8));
    expect(() => decodeMask(f64)).toThrow(/mask dtype/);
    expect(() => decodeSegments(f64)).toThrow(/segment map dtype/);
  });
});

describe('segment map decoding', () => {
  it('reads u32 ids', () => {
    const ids = new Uint32Array([0, 1, 1, 70000]);
    const bytes = buildContainer(
      { rows: 2, cols: 2, bands: 1, dtype: 'u32' },
      new Uint8Array(ids.buffer.slice(0)),
    );
    const map = decodeSegments(bytes);
    expect(Array.from(map.segments)).toEqual([0, 1, 1, 70000]);
  });
});
