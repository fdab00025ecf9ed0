import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError, OfflineError } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("ApiClient", () => {
  it("prefixes the base url and parses the windows payload", async () => {
    const fetchMock = vi.fn().mockResolvedValue(
      jsonResponse({ windows: [{ window: 8, phase: "awaiting_review" }] }),
    );
    vi.stubGlobal("fetch", fetchMock);
    const api = new ApiClient("http://svc:8000");
    const out = await api.listWindows();
    expect(fetchMock).toHaveBeenCalledWith(
      "http://svc:8000/v1/windows",
      undefined,
    );
    expect(out.windows[0]!.window).toBe(8);
  });

  it("passes the limit through to the anomalies endpoint", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ window: 8, phase: "closed", items: [] }));
    vi.stubGlobal("fetch", fetchMock);
    await new ApiClient().anomalies(8, 123);
    expect(fetchMock).toHaveBeenCalledWith(
      "/v1/windows/8/anomalies?limit=123",
      undefined,
    );
  });

  it("posts verdicts as json", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ event_id: "8:3", verdict: "benign" }));
    vi.stubGlobal("fetch", fetchMock);
    await new ApiClient().submitVerdict(8, "8:3", "benign", "looks fine");
    const [url, init] = fetchMock.mock.calls[0]!;
    expect(url).toBe("/v1/windows/8/verdicts");
    expect(init.method).toBe("POST");
    expect(init.headers["content-type"]).toBe("application/json");
    expect(JSON.parse(init.body)).toEqual({
      event_id: "8:3",
      verdict: "benign",
      note: "looks fine",
    });
  });

  it("posts retrain with no body", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ window: 8, phase: "closed" }));
    vi.stubGlobal("fetch", fetchMock);
    await new ApiClient().retrain(8);
    const [url, init] = fetchMock.mock.calls[0]!;
    expect(url).toBe("/v1/windows/8/retrain");
    expect(init.method).toBe("POST");
  });

  it("surfaces the service detail on a conflict", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(
        jsonResponse({ detail: "window 8 is closed; verdicts are frozen" }, 409),
      ),
    );
    const err = await new ApiClient()
      .submitVerdict(8, "8:0", "malicious")
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).detail).toContain("verdicts are frozen");
  });

  it("falls back to the status text when the error body is not json", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(
        new Response("<html>bad gateway</html>", {
          status: 502,
          statusText: "Bad Gateway",
        }),
      ),
    );
    const err = await new ApiClient().listWindows().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).detail).toBe("Bad Gateway");
  });

  it("reports a network failure as OfflineError", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockRejectedValue(new TypeError("fetch failed")),
    );
    const err = await new ApiClient().listWindows().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(OfflineError);
  });
});
