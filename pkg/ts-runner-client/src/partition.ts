/** Contiguous block decomposition matching the server's redistribution map. */

export interface Range {
  start: number;
  stop: number;
}

export function rangeLength(r: Range): number {
  return r.stop - r.start;
}

export function intersect(a: Range, b: Range): Range {
  const start = Math.max(a.start, b.start);
  const stop = Math.min(a.stop, b.stop);
  return { start, stop: Math.max(start, stop) };
}

/**
 * Split [0, total) into `parts` contiguous ranges whose sizes differ by at
 * most one, larger ranges first.
 */
export function blockDecompose(total: number, parts: number): Range[] {
  if (parts < 1) throw new Error(`parts must be >= 1, got ${parts}`);
  if (total < 0) throw new Error(`total must be >= 0, got ${total}`);
  const base = Math.floor(total / parts);
  const extra = total % parts;
  const out: Range[] = [];
  let start = 0;
  for (let i = 0; i < parts; i++) {
    const size = base + (i < extra ? 1 : 0);
    out.push({ start, stop: start + size });
    start += size;
  }
  return out;
}
