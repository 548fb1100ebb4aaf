import type {
  FrameBundle,
  MaskletSummary,
  ParameterBounds,
  Parameters,
  SequenceInfo,
} from "./types";

export class ApiError extends Error {
  constructor(message: string, readonly status: number, readonly detail: unknown) {
    super(message);
  }
}

export class BusyError extends ApiError {}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(`${base}${path}`, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  if (!response.ok) {
    let detail: unknown = null;
    try {
      detail = (await response.json()).detail;
    } catch {
      // non-JSON error body; keep detail null
    }
    const cls = response.status === 409 ? BusyError : ApiError;
    throw new cls(`${path} failed (${response.status})`, response.status, detail);
  }
  return (await response.json()) as T;
}

/** Typed client for the review service; all mutations go through here. */
export class ReviewApi {
  constructor(readonly base: string = "/api/v1") {}

  async sequences(): Promise<SequenceInfo[]> {
    const body = await request<{ sequences: SequenceInfo[] }>(this.base, "/sequences");
    return body.sequences;
  }

  async frame(sequenceId: string, frame: number): Promise<FrameBundle> {
    return request<FrameBundle>(
      this.base,
      `/sequences/${encodeURIComponent(sequenceId)}/frames/${frame}`,
    );
  }

  async parameters(): Promise<{ parameters: Parameters; bounds: ParameterBounds }> {
    return request(this.base, "/parameters");
  }

  async putParameters(updates: Partial<Parameters>): Promise<Parameters> {
    const body = await request<{ parameters: Parameters }>(this.base, "/parameters", {
      method: "PUT",
      body: JSON.stringify(updates),
    });
    return body.parameters;
  }

  async refuse(): Promise<Record<string, number | null>> {
    const body = await request<{ scores: Record<string, number | null> }>(
      this.base,
      "/refuse",
      { method: "POST" },
    );
    return body.scores;
  }

  async masklets(): Promise<MaskletSummary[]> {
    const body = await request<{ masklets: MaskletSummary[] }>(this.base, "/masklets");
    return body.masklets;
  }

  async recordVerdict(maskletId: number, verdict: "accept" | "reject"): Promise<void> {
    await request(this.base, `/masklets/${maskletId}/verdict`, {
      method: "POST",
      body: JSON.stringify({ verdict }),
    });
  }
}
