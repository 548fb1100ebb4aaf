import { describe, expect, it } from "vitest";

import { formatScore, maskRuns, renderFrame, renderMaskletTable } from "../src/render";
import { rleDecode } from "../src/rle";
import type { FrameBundle, MaskletSummary } from "../src/types";

function bundleFixture(): FrameBundle {
  // Two masklets: a 2x2 block and a single pixel on an 8x4 image.
  return {
    version: 1,
    frame: 3,
    cameras: {
      cam0: {
        width: 8,
        height: 4,
        masks: [
          {
            masklet_id: 1,
            rle: { width: 8, height: 4, counts: [9, 2, 6, 2, 13] },
            score: 1.0,
            no_score: false,
            verdict: null,
          },
          {
            masklet_id: 2,
            rle: { width: 8, height: 4, counts: [31, 1] },
            score: null,
            no_score: true,
            verdict: null,
          },
        ],
      },
    },
    lidar: { count: 42, masklets: [{ masklet_id: 1, indices: [0, 1, 2] }] },
    bev: [
      { masklet_id: 1, points: [[5, 0], [5.2, 0.2]] },
      { masklet_id: 2, points: [[9, 3]] },
    ],
  };
}

describe("frame rendering", () => {
  it("draws one overlay group and one bev group per masklet", () => {
    const view = renderFrame(bundleFixture(), null, { onSelectMasklet: () => {} });
    const overlays = view.querySelectorAll("g.mask-overlay");
    expect(overlays).toHaveLength(2);
    const fills = new Set(
      [...overlays].map((g) => g.querySelector("rect")?.getAttribute("fill")));
    expect(fills.size).toBe(2);
    expect(view.querySelectorAll("g.bev-group")).toHaveLength(2);
  });

  it("run-length geometry matches the decoded mask", () => {
    const rle = { width: 8, height: 4, counts: [9, 2, 6, 2, 13] };
    const runs = maskRuns(rleDecode(rle), 8, 4);
    expect(runs).toEqual([
      [1, 1, 2],
      [2, 1, 2],
    ]);
  });

  it("selecting a masklet highlights both panes", () => {
    const view = renderFrame(bundleFixture(), 1, { onSelectMasklet: () => {} });
    const overlay = view.querySelector('g.mask-overlay[data-masklet-id="1"]');
    const bev = view.querySelector('g.bev-group[data-masklet-id="1"]');
    expect(overlay?.classList.contains("selected")).toBe(true);
    expect(bev?.classList.contains("selected")).toBe(true);
    const other = view.querySelector('g.mask-overlay[data-masklet-id="2"]');
    expect(other?.classList.contains("selected")).toBe(false);
  });

  it("clicking the bev pane reports the masklet id", () => {
    let clicked: number | null = null;
    const view = renderFrame(bundleFixture(), null, {
      onSelectMasklet: (id) => (clicked = id),
    });
    const bev = view.querySelector('g.bev-group[data-masklet-id="2"]');
    bev?.dispatchEvent(new MouseEvent("click", { bubbles: true }));
    expect(clicked).toBe(2);
  });
});

describe("masklet table", () => {
  const rows: MaskletSummary[] = [
    { masklet_id: 1, voxel_count: 24, score: 1.0, no_score: false,
      objects: [1], cameras: ["cam0"], verdict: "accept" },
    { masklet_id: 2, voxel_count: 3, score: null, no_score: true,
      objects: [2], cameras: ["cam0"], verdict: null },
  ];

  it("renders n/a for no-score masklets, not 0", () => {
    expect(formatScore(null, true)).toBe("n/a");
    const table = renderMaskletTable(rows, null, null,
      { onSelectMasklet: () => {}, onVerdict: () => {} });
    const badges = [...table.querySelectorAll(".score-badge")].map(
      (el) => el.textContent);
    expect(badges).toEqual(["1.000", "n/a"]);
  });

  it("shows score deltas against the previous fusion", () => {
    const table = renderMaskletTable(rows, null, { 1: 0.8, 2: null },
      { onSelectMasklet: () => {}, onVerdict: () => {} });
    const deltas = [...table.querySelectorAll(".score-delta")].map(
      (el) => el.textContent);
    expect(deltas[0]).toBe("+0.200");
    expect(deltas[1]).toBe("-");
  });

  it("verdict buttons report their masklet and kind", () => {
    const got: [number, string][] = [];
    const table = renderMaskletTable(rows, null, null, {
      onSelectMasklet: () => {},
      onVerdict: (id, verdict) => got.push([id, verdict]),
    });
    table.querySelector<HTMLButtonElement>(
      'tr[data-masklet-id="2"] button.verdict-reject')?.click();
    expect(got).toEqual([[2, "reject"]]);
  });
});
