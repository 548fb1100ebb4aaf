import { PARAMETER_NAMES, type ParameterBounds, type ParameterName, type Parameters } from "./types";

/**
 * Client view state. Everything except the unsaved parameter draft is a pure
 * projection of server state, so a reload reconstructs it.
 */
export interface ViewState {
  sequenceId: string | null;
  frameCount: number;
  frame: number;
  selectedMasklet: number | null;
  parameters: Parameters;
  bounds: ParameterBounds;
  draft: Partial<Parameters>;
  dirty: boolean;
}

export function initialState(): ViewState {
  const zeros = Object.fromEntries(PARAMETER_NAMES.map((n) => [n, 0])) as Parameters;
  const bounds = Object.fromEntries(
    PARAMETER_NAMES.map((n) => [n, { min: 0, max: 1 }]),
  ) as ParameterBounds;
  return {
    sequenceId: null,
    frameCount: 0,
    frame: 0,
    selectedMasklet: null,
    parameters: zeros,
    bounds,
    draft: {},
    dirty: false,
  };
}

export function setSequence(state: ViewState, id: string, frameCount: number): ViewState {
  return { ...state, sequenceId: id, frameCount, frame: 0, selectedMasklet: null };
}

export function setFrame(state: ViewState, frame: number): ViewState {
  const clamped = Math.min(Math.max(frame, 0), Math.max(state.frameCount - 1, 0));
  return { ...state, frame: clamped };
}

export function selectMasklet(state: ViewState, maskletId: number | null): ViewState {
  return { ...state, selectedMasklet: maskletId };
}

export function setServerParameters(
  state: ViewState,
  parameters: Parameters,
  bounds: ParameterBounds,
): ViewState {
  return { ...state, parameters, bounds, draft: {}, dirty: false };
}

/** Validate one draft field against the server-advertised bounds. */
export function validateDraftValue(
  state: ViewState,
  name: ParameterName,
  raw: string | number,
): { ok: true; value: number } | { ok: false; message: string } {
  const value = typeof raw === "number" ? raw : Number(raw);
  if (!Number.isFinite(value)) {
    return { ok: false, message: "not a number" };
  }
  const { min, max } = state.bounds[name];
  if (value < min || value > max) {
    return { ok: false, message: `must lie in [${min}, ${max}]` };
  }
  if (name === "min_pts" && !Number.isInteger(value)) {
    return { ok: false, message: "must be an integer" };
  }
  return { ok: true, value };
}

export function setDraftValue(
  state: ViewState,
  name: ParameterName,
  value: number,
): ViewState {
  const draft = { ...state.draft, [name]: value };
  if (value === state.parameters[name]) {
    delete draft[name];
  }
  const dirty = Object.keys(draft).length > 0;
  return { ...state, draft, dirty };
}

export function effectiveParameters(state: ViewState): Parameters {
  return { ...state.parameters, ...state.draft };
}
