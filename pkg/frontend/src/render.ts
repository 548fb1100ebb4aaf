import { maskletColor, maskletStroke } from "./colors";
import { rleDecode } from "./rle";
import type { BevGroup, CameraBundle, FrameBundle, MaskletSummary } from "./types";

const SVG_NS = "http://www.w3.org/2000/svg";

export interface RenderHandlers {
  onSelectMasklet(maskletId: number): void;
}

export function formatScore(score: number | null, noScore: boolean): string {
  if (noScore || score === null) {
    return "n/a";
  }
  return score.toFixed(3);
}

/** Per-row on-runs of a decoded mask, as [row, start, length] triples. */
export function maskRuns(flat: boolean[], width: number, height: number): [number, number, number][] {
  const runs: [number, number, number][] = [];
  for (let row = 0; row < height; row++) {
    let start = -1;
    for (let col = 0; col <= width; col++) {
      const on = col < width && flat[row * width + col];
      if (on && start < 0) {
        start = col;
      } else if (!on && start >= 0) {
        runs.push([row, start, col - start]);
        start = -1;
      }
    }
  }
  return runs;
}

/** Image pane: one SVG group of row-run rects per masklet over a dark field. */
export function renderImagePane(
  camera: CameraBundle,
  selected: number | null,
  handlers: RenderHandlers,
): SVGSVGElement {
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${camera.width} ${camera.height}`);
  svg.setAttribute("preserveAspectRatio", "xMidYMid meet");
  svg.classList.add("image-pane");
  const backdrop = document.createElementNS(SVG_NS, "rect");
  backdrop.setAttribute("width", String(camera.width));
  backdrop.setAttribute("height", String(camera.height));
  backdrop.setAttribute("fill", "#15161a");
  svg.appendChild(backdrop);

  for (const mask of camera.masks) {
    const group = document.createElementNS(SVG_NS, "g");
    group.classList.add("mask-overlay");
    group.dataset.maskletId = String(mask.masklet_id);
    if (mask.masklet_id === selected) {
      group.classList.add("selected");
    }
    const flat = rleDecode(mask.rle);
    for (const [row, start, length] of maskRuns(flat, mask.rle.width, mask.rle.height)) {
      const rect = document.createElementNS(SVG_NS, "rect");
      rect.setAttribute("x", String(start));
      rect.setAttribute("y", String(row));
      rect.setAttribute("width", String(length));
      rect.setAttribute("height", "1");
      rect.setAttribute("fill", maskletColor(mask.masklet_id,
        mask.masklet_id === selected ? 0.9 : 0.55));
      group.appendChild(rect);
    }
    group.addEventListener("click", () => handlers.onSelectMasklet(mask.masklet_id));
    svg.appendChild(group);
  }
  return svg;
}

/** BEV pane: voxel centers as a 2D scatter, one group per masklet. */
export function renderBevPane(
  groups: BevGroup[],
  selected: number | null,
  handlers: RenderHandlers,
): SVGSVGElement {
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.classList.add("bev-pane");
  const points = groups.flatMap((g) => g.points);
  let minX = 0, maxX = 1, minY = -1, maxY = 1;
  if (points.length) {
    minX = Math.min(...points.map((p) => p[0])) - 1;
    maxX = Math.max(...points.map((p) => p[0])) + 1;
    minY = Math.min(...points.map((p) => p[1])) - 1;
    maxY = Math.max(...points.map((p) => p[1])) + 1;
  }
  // World +x is up on screen, +y is left: the forward direction points up.
  svg.setAttribute("viewBox", `${-maxY} ${-maxX} ${maxY - minY} ${maxX - minX}`);
  svg.setAttribute("preserveAspectRatio", "xMidYMid meet");

  for (const group of groups) {
    const g = document.createElementNS(SVG_NS, "g");
    g.classList.add("bev-group");
    g.dataset.maskletId = String(group.masklet_id);
    if (group.masklet_id === selected) {
      g.classList.add("selected");
    }
    for (const [x, y] of group.points) {
      const c = document.createElementNS(SVG_NS, "circle");
      c.setAttribute("cx", String(-y));
      c.setAttribute("cy", String(-x));
      c.setAttribute("r", group.masklet_id === selected ? "0.22" : "0.12");
      c.setAttribute("fill", maskletStroke(group.masklet_id));
      g.appendChild(c);
    }
    g.addEventListener("click", () => handlers.onSelectMasklet(group.masklet_id));
    svg.appendChild(g);
  }
  return svg;
}

/** Composited frame view: image pane(s) beside the BEV scatter. */
export function renderFrame(
  bundle: FrameBundle,
  selected: number | null,
  handlers: RenderHandlers,
): HTMLElement {
  const root = document.createElement("div");
  root.classList.add("frame-view");
  const cameras = document.createElement("div");
  cameras.classList.add("camera-panes");
  for (const [cameraId, camera] of Object.entries(bundle.cameras).sort()) {
    const cell = document.createElement("figure");
    cell.classList.add("camera-cell");
    const caption = document.createElement("figcaption");
    caption.textContent = `${cameraId} (frame ${bundle.frame})`;
    cell.appendChild(caption);
    cell.appendChild(renderImagePane(camera, selected, handlers));
    cameras.appendChild(cell);
  }
  root.appendChild(cameras);

  const bevCell = document.createElement("figure");
  bevCell.classList.add("bev-cell");
  const bevCaption = document.createElement("figcaption");
  bevCaption.textContent = `bird's-eye voxels (${bundle.lidar.count} points in scan)`;
  bevCell.appendChild(bevCaption);
  bevCell.appendChild(renderBevPane(bundle.bev, selected, handlers));
  root.appendChild(bevCell);
  return root;
}

export interface MaskletRowHandlers extends RenderHandlers {
  onVerdict(maskletId: number, verdict: "accept" | "reject"): void;
}

/** Masklet table with score badges, score deltas, and verdict buttons. */
export function renderMaskletTable(
  masklets: MaskletSummary[],
  selected: number | null,
  previousScores: Record<number, number | null> | null,
  handlers: MaskletRowHandlers,
): HTMLTableElement {
  const table = document.createElement("table");
  table.classList.add("masklet-table");
  const head = table.createTHead().insertRow();
  for (const title of ["masklet", "voxels", "score", "delta", "verdict", ""]) {
    const th = document.createElement("th");
    th.textContent = title;
    head.appendChild(th);
  }
  const body = table.createTBody();
  for (const m of masklets) {
    const row = body.insertRow();
    row.dataset.maskletId = String(m.masklet_id);
    if (m.masklet_id === selected) {
      row.classList.add("selected");
    }
    const name = row.insertCell();
    name.textContent = `#${m.masklet_id}`;
    name.style.color = maskletStroke(m.masklet_id);
    name.addEventListener("click", () => handlers.onSelectMasklet(m.masklet_id));

    row.insertCell().textContent = String(m.voxel_count);

    const badge = row.insertCell();
    badge.classList.add("score-badge");
    badge.textContent = formatScore(m.score, m.no_score);

    const delta = row.insertCell();
    delta.classList.add("score-delta");
    if (previousScores && m.masklet_id in previousScores) {
      const before = previousScores[m.masklet_id];
      if (before !== null && m.score !== null) {
        const d = m.score - before;
        delta.textContent = (d >= 0 ? "+" : "") + d.toFixed(3);
        delta.classList.add(d > 0 ? "up" : d < 0 ? "down" : "flat");
      } else {
        delta.textContent = "-";
      }
    } else {
      delta.textContent = "";
    }

    const verdict = row.insertCell();
    verdict.classList.add("verdict-state");
    verdict.textContent = m.verdict ?? "";

    const actions = row.insertCell();
    for (const kind of ["accept", "reject"] as const) {
      const button = document.createElement("button");
      button.textContent = kind;
      button.classList.add(`verdict-${kind}`);
      button.addEventListener("click", () => handlers.onVerdict(m.masklet_id, kind));
      actions.appendChild(button);
    }
  }
  return table;
}
