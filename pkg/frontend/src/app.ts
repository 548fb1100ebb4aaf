import { ApiError, BusyError, ReviewApi } from "./api";
import {
  effectiveParameters,
  initialState,
  selectMasklet,
  setDraftValue,
  setFrame,
  setSequence,
  setServerParameters,
  validateDraftValue,
  type ViewState,
} from "./state";
import { renderFrame, renderMaskletTable, type MaskletRowHandlers } from "./render";
import { PARAMETER_NAMES, type MaskletSummary, type ParameterName } from "./types";

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/**
 * The review app: fetch server state, render the frame and masklet table,
 * batch parameter edits into one apply-and-refuse action, record verdicts.
 * All pipeline logic stays on the server.
 */
export class App {
  state: ViewState = initialState();
  masklets: MaskletSummary[] = [];
  previousScores: Record<number, number | null> | null = null;
  fieldErrors: Partial<Record<ParameterName, string>> = {};
  status = "";

  constructor(readonly root: HTMLElement, readonly api: ReviewApi = new ReviewApi()) {}

  async load(): Promise<void> {
    const sequences = await this.api.sequences();
    if (sequences.length) {
      this.state = setSequence(this.state, sequences[0].id, sequences[0].frame_count);
    }
    const { parameters, bounds } = await this.api.parameters();
    this.state = setServerParameters(this.state, parameters, bounds);
    this.masklets = await this.api.masklets();
    await this.render();
  }

  async render(): Promise<void> {
    this.root.textContent = "";
    const handlers: MaskletRowHandlers = {
      onSelectMasklet: (id) => {
        this.state = selectMasklet(this.state,
          this.state.selectedMasklet === id ? null : id);
        void this.render();
      },
      onVerdict: (id, verdict) => void this.recordVerdict(id, verdict),
    };

    this.root.appendChild(this.renderToolbar());
    this.root.appendChild(this.renderParameterForm());

    const statusLine = document.createElement("div");
    statusLine.classList.add("status-line");
    statusLine.textContent = this.status;
    this.root.appendChild(statusLine);

    if (this.state.sequenceId !== null) {
      try {
        const bundle = await this.api.frame(this.state.sequenceId, this.state.frame);
        this.root.appendChild(renderFrame(bundle, this.state.selectedMasklet, handlers));
      } catch (err) {
        this.root.appendChild(this.renderErrorPanel(err));
      }
    }
    this.root.appendChild(
      renderMaskletTable(this.masklets, this.state.selectedMasklet,
        this.previousScores, handlers));
  }

  private renderErrorPanel(err: unknown): HTMLElement {
    const panel = document.createElement("pre");
    panel.classList.add("error-panel");
    const detail = err instanceof ApiError ? JSON.stringify(err.detail) : String(err);
    panel.textContent = `frame load failed: ${detail}`;
    return panel;
  }

  private renderToolbar(): HTMLElement {
    const bar = document.createElement("div");
    bar.classList.add("toolbar");
    const label = document.createElement("span");
    label.textContent = this.state.sequenceId
      ? `${this.state.sequenceId} frame ${this.state.frame + 1}/${this.state.frameCount}`
      : "no sequence";
    bar.appendChild(label);
    const prev = document.createElement("button");
    prev.textContent = "prev";
    prev.classList.add("frame-prev");
    prev.addEventListener("click", () => {
      this.state = setFrame(this.state, this.state.frame - 1);
      void this.render();
    });
    const next = document.createElement("button");
    next.textContent = "next";
    next.classList.add("frame-next");
    next.addEventListener("click", () => {
      this.state = setFrame(this.state, this.state.frame + 1);
      void this.render();
    });
    bar.append(prev, next);
    return bar;
  }

  private renderParameterForm(): HTMLElement {
    const form = document.createElement("form");
    form.classList.add("parameter-form");
    form.addEventListener("submit", (e) => e.preventDefault());
    const effective = effectiveParameters(this.state);
    for (const name of PARAMETER_NAMES) {
      const field = document.createElement("label");
      field.classList.add("parameter-field");
      field.textContent = name;
      const input = document.createElement("input");
      input.name = name;
      input.value = String(effective[name]);
      input.addEventListener("change", () => this.editParameter(name, input.value));
      field.appendChild(input);
      const error = document.createElement("span");
      error.classList.add("field-error");
      error.textContent = this.fieldErrors[name] ?? "";
      field.appendChild(error);
      form.appendChild(field);
    }
    const apply = document.createElement("button");
    apply.textContent = this.state.dirty ? "apply + re-fuse" : "re-fuse";
    apply.classList.add("apply-button");
    apply.addEventListener("click", () => void this.tuneAndRefuse());
    form.appendChild(apply);
    return form;
  }

  /** Client-side validation against server bounds; invalid input never
   * reaches the network. */
  editParameter(name: ParameterName, raw: string): void {
    const check = validateDraftValue(this.state, name, raw);
    if (!check.ok) {
      this.fieldErrors[name] = check.message;
    } else {
      delete this.fieldErrors[name];
      this.state = setDraftValue(this.state, name, check.value);
    }
    void this.render();
  }

  /** PUT the draft, trigger a re-fuse, wait it out, re-render with score
   * deltas against the previous fusion. */
  async tuneAndRefuse(): Promise<void> {
    if (Object.keys(this.fieldErrors).length) {
      this.status = "fix invalid parameters first";
      await this.render();
      return;
    }
    this.previousScores = Object.fromEntries(
      this.masklets.map((m) => [m.masklet_id, m.score]));
    if (this.state.dirty) {
      const parameters = await this.api.putParameters(this.state.draft);
      this.state = setServerParameters(this.state, parameters, this.state.bounds);
    }
    this.status = "re-fusing...";
    await this.render();
    for (;;) {
      try {
        await this.api.refuse();
        break;
      } catch (err) {
        if (err instanceof BusyError) {
          this.status = "re-fuse queued (busy)";
          await this.render();
          await sleep(250);
          continue;
        }
        throw err;
      }
    }
    this.masklets = await this.api.masklets();
    this.status = "re-fuse done";
    await this.render();
  }

  /** Optimistic verdict mark, confirmed against the server response; a
   * failure rolls back and asks for a retry. */
  async recordVerdict(maskletId: number, verdict: "accept" | "reject"): Promise<void> {
    const target = this.masklets.find((m) => m.masklet_id === maskletId);
    const before = target?.verdict ?? null;
    if (target) {
      target.verdict = verdict;
      await this.render();
    }
    try {
      await this.api.recordVerdict(maskletId, verdict);
      this.masklets = await this.api.masklets();
    } catch (err) {
      if (target) {
        target.verdict = before;
      }
      this.status = `verdict failed, retry? (${err instanceof Error ? err.message : err})`;
    }
    await this.render();
  }
}
