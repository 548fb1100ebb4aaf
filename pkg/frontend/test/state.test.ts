import { describe, expect, it } from "vitest";

import {
  effectiveParameters,
  initialState,
  setDraftValue,
  setFrame,
  setSequence,
  setServerParameters,
  validateDraftValue,
} from "../src/state";
import type { ParameterBounds, Parameters } from "../src/types";

const PARAMS: Parameters = {
  eps: 0.5,
  min_pts: 5,
  vote_rate_threshold: 0,
  overlap_threshold: 0.5,
  transfer_radius_voxels: 1.5,
};

const BOUNDS: ParameterBounds = {
  eps: { min: 0.01, max: 10 },
  min_pts: { min: 1, max: 100 },
  vote_rate_threshold: { min: 0, max: 1 },
  overlap_threshold: { min: 0, max: 1 },
  transfer_radius_voxels: { min: 0.1, max: 10 },
};

function loaded() {
  let s = setSequence(initialState(), "seq", 20);
  return setServerParameters(s, PARAMS, BOUNDS);
}

describe("view state", () => {
  it("clamps the frame index to the sequence bounds", () => {
    let s = loaded();
    expect(setFrame(s, -3).frame).toBe(0);
    expect(setFrame(s, 5).frame).toBe(5);
    expect(setFrame(s, 99).frame).toBe(19);
  });

  it("validates draft values against server bounds", () => {
    const s = loaded();
    expect(validateDraftValue(s, "eps", "0.75")).toEqual({ ok: true, value: 0.75 });
    const high = validateDraftValue(s, "eps", "99");
    expect(high.ok).toBe(false);
    if (!high.ok) expect(high.message).toContain("10");
    expect(validateDraftValue(s, "eps", "abc").ok).toBe(false);
    expect(validateDraftValue(s, "min_pts", "2.5").ok).toBe(false);
  });

  it("tracks the dirty flag through drafts", () => {
    let s = loaded();
    expect(s.dirty).toBe(false);
    s = setDraftValue(s, "eps", 0.75);
    expect(s.dirty).toBe(true);
    expect(effectiveParameters(s).eps).toBe(0.75);
    // Reverting to the server value clears the draft.
    s = setDraftValue(s, "eps", 0.5);
    expect(s.dirty).toBe(false);
  });

  it("applying server parameters resets the draft", () => {
    let s = loaded();
    s = setDraftValue(s, "vote_rate_threshold", 0.4);
    s = setServerParameters(s, { ...PARAMS, vote_rate_threshold: 0.4 }, BOUNDS);
    expect(s.dirty).toBe(false);
    expect(s.parameters.vote_rate_threshold).toBe(0.4);
  });
});
