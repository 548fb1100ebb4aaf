// Stable per-masklet colors: the id hashes to a hue, so the same masklet
// keeps its color across frames, panes, and reloads.

export function maskletHue(maskletId: number): number {
  let h = (maskletId + 1) * 2654435761;
  h = (h ^ (h >>> 16)) >>> 0;
  return h % 360;
}

export function maskletColor(maskletId: number, alpha = 0.55): string {
  return `hsla(${maskletHue(maskletId)}, 80%, 55%, ${alpha})`;
}

export function maskletStroke(maskletId: number): string {
  return `hsl(${maskletHue(maskletId)}, 85%, 40%)`;
}
