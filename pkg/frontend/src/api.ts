import type {
  AnomaliesPayload,
  TriageItem,
  WindowDetail,
  WindowSummary,
} from "./types.js";

/** Service rejected the request; `detail` is its human-readable reason. */
export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

/** The request never reached the service (network failure). */
export class OfflineError extends Error {
  constructor(cause: unknown) {
    super(`service unreachable: ${String(cause)}`);
  }
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await fetch(this.base + path, init);
    } catch (err) {
      throw new OfflineError(err);
    }
    if (!res.ok) {
      let detail = res.statusText || `status ${res.status}`;
      try {
        const blob: unknown = await res.json();
        if (
          blob &&
          typeof blob === "object" &&
          typeof (blob as { detail?: unknown }).detail === "string"
        ) {
          detail = (blob as { detail: string }).detail;
        }
      } catch {
        // keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  listWindows(): Promise<{ windows: WindowSummary[] }> {
    return this.request("/v1/windows");
  }

  windowDetail(t: number): Promise<WindowDetail> {
    return this.request(`/v1/windows/${t}`);
  }

  anomalies(t: number, limit: number): Promise<AnomaliesPayload> {
    return this.request(`/v1/windows/${t}/anomalies?limit=${limit}`);
  }

  submitVerdict(
    t: number,
    eventId: string,
    verdict: "benign" | "malicious",
    note = "",
  ): Promise<TriageItem> {
    return this.request(`/v1/windows/${t}/verdicts`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ event_id: eventId, verdict, note }),
    });
  }

  retrain(t: number): Promise<WindowDetail> {
    return this.request(`/v1/windows/${t}/retrain`, { method: "POST" });
  }
}
