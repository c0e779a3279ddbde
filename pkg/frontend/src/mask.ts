/**
 * Editable label mask behind the canvas: brush and rectangle strokes write
 * bag codes into a pixel grid, with an undo stack over whole strokes.
 *
 * Codes follow the mask container convention: 0 unlabeled, 1 negative,
 * >= 2 one positive bag per stroke group. Each positive stroke group gets
 * the next unused code, so separately painted regions stay separate bags.
 */

import type { Mask } from './container';
import type { BagsDocument } from './api';

export type Tool = 'brush' | 'rect';
export type LabelKind = 'positive' | 'negative' | 'erase';

const UNDO_DEPTH = 64;

export class MaskModel {
  readonly rows: number;
  readonly cols: number;
  private codes: Uint16Array;
  private undoStack: Uint16Array[] = [];
  private strokeOpen = false;
  private strokeCode = 0;

  constructor(rows: number, cols: number) {
    if (rows <= 0 || cols <= 0) throw new Error('rows and cols must be positive');
    this.rows = rows;
    this.cols = cols;
    this.codes = new Uint16Array(rows * cols);
  }

  /** Snapshot of the current codes (callers must not mutate it). */
  snapshot(): Uint16Array {
    return this.codes.slice();
  }

  codeAt(row: number, col: number): number {
    return this.codes[row * this.cols + col];
  }

  /**
   * Open a stroke group: pushes an undo snapshot and fixes the code every
   * paint call will write until endStroke. Positive strokes allocate the
   * next unused code so each group becomes its own bag.
   */
  beginStroke(kind: LabelKind): void {
    if (this.strokeOpen) this.endStroke();
    this.undoStack.push(this.codes.slice());
    if (this.undoStack.length > UNDO_DEPTH) this.undoStack.shift();
    this.strokeOpen = true;
    if (kind === 'positive') {
      let next = 2;
      for (const c of this.codes) if (c >= next) next = c + 1;
      this.strokeCode = next;
    } else {
      this.strokeCode = kind === 'negative' ? 1 : 0;
    }
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  private write(row: number, col: number): void {
    if (row < 0 || row >= this.rows || col < 0 || col >= this.cols) return;
    this.codes[row * this.cols + col] = this.strokeCode;
  }

  /** Paint a filled disc of the stroke's code around (row, col). */
  paintBrush(row: number, col: number, radius: number): void {
    if (!this.strokeOpen) throw new Error('paint outside a stroke');
    const r = Math.max(0, radius);
    const span = Math.ceil(r);
    for (let dr = -span; dr <= span; dr++) {
      for (let dc = -span; dc <= span; dc++) {
        if (dr * dr + dc * dc <= r * r) this.write(row + dr, col + dc);
      }
    }
  }

  /** Paint a filled rectangle between two corners, inclusive. */
  paintRect(r0: number, c0: number, r1: number, c1: number): void {
    if (!this.strokeOpen) throw new Error('paint outside a stroke');
    const [rlo, rhi] = r0 <= r1 ? [r0, r1] : [r1, r0];
    const [clo, chi] = c0 <= c1 ? [c0, c1] : [c1, c0];
    for (let r = rlo; r <= rhi; r++) {
      for (let c = clo; c <= chi; c++) this.write(r, c);
    }
  }

  /** Revert the last stroke. Returns false when there is nothing to undo. */
  undo(): boolean {
    const previous = this.undoStack.pop();
    if (previous === undefined) return false;
    this.codes = previous;
    this.strokeOpen = false;
    return true;
  }

  undoDepth(): number {
    return this.undoStack.length;
  }

  isEmpty(): boolean {
    return this.codes.every((c) => c === 0);
  }

  /**
   * Mirror of the service's bag preconditions, checked before a run is
   * launched so the block happens locally instead of as a 422.
   * Returns null when the labeling is usable.
   */
  validate(): string | null {
    let positives = 0;
    let negatives = 0;
    for (const c of this.codes) {
      if (c === 1) negatives++;
      else if (c >= 2) positives++;
    }
    if (positives === 0) return 'need ≥1 positive bag';
    if (negatives === 0) return 'need ≥1 negative bag';
    return null;
  }

  toMask(): Mask {
    return { rows: this.rows, cols: this.cols, codes: this.codes.slice() };
  }

  /** Replace the grid wholesale (one undoable step). */
  loadCodes(codes: Uint16Array): void {
    if (codes.length !== this.rows * this.cols) {
      throw new Error(`expected ${this.rows * this.cols} codes, got ${codes.length}`);
    }
    this.undoStack.push(this.codes.slice());
    if (this.undoStack.length > UNDO_DEPTH) this.undoStack.shift();
    this.codes = codes.slice();
    this.strokeOpen = false;
  }

  /**
   * Toggle one ranked unit's label: a unit painted entirely positive goes
   * negative, anything else becomes a fresh positive group.
   */
  flipLabel(pixels: number[]): void {
    const allPositive =
      pixels.length > 0 && pixels.every((p) => this.codes[p] >= 2);
    this.beginStroke(allPositive ? 'negative' : 'positive');
    for (const p of pixels) {
      const row = Math.floor(p / this.cols);
      this.write(row, p - row * this.cols);
    }
    this.endStroke();
  }
}

/**
 * Rebuild mask codes from the service's bag document. Mask uploads produce
 * ids "pos{code}" / "neg{nnn}", so the original per-pixel codes come back
 * exactly; bags from other sources fall back to sequential positive codes.
 */
export function codesFromBags(doc: BagsDocument, rows: number, cols: number): Uint16Array {
  const codes = new Uint16Array(rows * cols);
  let fallback = 2;
  for (const bag of doc.bags) {
    if (bag.label === 1) {
      const named = /^pos(\d+)$/.exec(bag.id);
      const code = named ? parseInt(named[1], 10) : fallback++;
      if (named && code >= fallback) fallback = code + 1;
      for (const p of bag.pixels) codes[p] = code;
    } else {
      for (const p of bag.pixels) codes[p] = 1;
    }
  }
  return codes;
}
