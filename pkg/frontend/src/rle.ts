import type { RleMask } from "./types";

/** Decode row-major alternating runs (off-run first) into a boolean grid. */
export function rleDecode(rle: RleMask): boolean[] {
  const total = rle.width * rle.height;
  const sum = rle.counts.reduce((a, b) => a + b, 0);
  if (sum !== total) {
    throw new Error(`rle counts sum to ${sum}, expected ${total}`);
  }
  const out = new Array<boolean>(total).fill(false);
  let pos = 0;
  let value = false;
  for (const run of rle.counts) {
    if (value) {
      out.fill(true, pos, pos + run);
    }
    pos += run;
    value = !value;
  }
  return out;
}

export function maskArea(rle: RleMask): number {
  let area = 0;
  for (let i = 1; i < rle.counts.length; i += 2) {
    area += rle.counts[i];
  }
  return area;
}
