// Wires the view to the service: one state object, full re-render per change,
// event delegation on data-action attributes.

import { ApiClient, ApiError, OfflineError } from "./api.js";
import { renderApp, type AppView } from "./render.js";
import type { PendingVerdict, TriageItem } from "./types.js";

const FETCH_LIMIT = 2000;
const PAGE_SIZE = 25;
const SCORING_POLL_MS = 2000;

declare global {
  interface Window {
    ANOMSTREAM_API?: string;
  }
}

const api = new ApiClient(window.ANOMSTREAM_API ?? "");
const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

const state: AppView = {
  windows: [],
  selected: null,
  detail: null,
  items: [],
  page: 0,
  pageSize: PAGE_SIZE,
  pending: new Map<string, PendingVerdict>(),
  retrainInflight: false,
  message: "",
};

let pollTimer: ReturnType<typeof setTimeout> | null = null;

function draw(): void {
  root!.innerHTML = renderApp(state);
}

function fail(err: unknown): void {
  state.message =
    err instanceof ApiError || err instanceof OfflineError
      ? err.message
      : String(err);
  draw();
}

async function refreshWindows(): Promise<void> {
  state.windows = (await api.listWindows()).windows;
  if (state.selected === null && state.windows.length > 0) {
    const open = state.windows.find((w) => w.phase !== "closed");
    state.selected = (open ?? state.windows[state.windows.length - 1]).window;
  }
}

async function loadSelected(): Promise<void> {
  if (state.selected === null) return;
  state.detail = await api.windowDetail(state.selected);
  if (state.detail.phase === "scoring") {
    state.items = [];
    schedulePoll();
  } else {
    state.items = (await api.anomalies(state.selected, FETCH_LIMIT)).items;
  }
}

function schedulePoll(): void {
  if (pollTimer !== null) clearTimeout(pollTimer);
  pollTimer = setTimeout(() => {
    pollTimer = null;
    if (state.detail?.phase === "scoring") {
      void refresh();
    }
  }, SCORING_POLL_MS);
}

async function refresh(): Promise<void> {
  try {
    await refreshWindows();
    await loadSelected();
    draw();
  } catch (err) {
    fail(err);
  }
}

function replaceItem(updated: TriageItem): void {
  const i = state.items.findIndex((it) => it.event_id === updated.event_id);
  if (i >= 0) state.items[i] = updated;
}

async function submitVerdict(
  eventId: string,
  verdict: "benign" | "malicious",
  note: string,
): Promise<void> {
  if (state.selected === null) return;
  state.pending.set(eventId, { verdict, note, state: "saving" });
  state.message = "";
  draw();
  try {
    const updated = await api.submitVerdict(
      state.selected,
      eventId,
      verdict,
      note,
    );
    state.pending.delete(eventId);
    replaceItem(updated);
  } catch (err) {
    if (err instanceof OfflineError) {
      // keep the intent; the analyst can retry once the service is back
      state.pending.set(eventId, { verdict, note, state: "queued" });
      state.message = "service unreachable; verdict queued";
    } else {
      state.pending.delete(eventId);
      state.message = err instanceof ApiError ? err.detail : String(err);
    }
  }
  draw();
}

async function triggerRetrain(t: number): Promise<void> {
  state.retrainInflight = true;
  state.message = "";
  draw();
  try {
    state.detail = await api.retrain(t);
    await refreshWindows();
    const ids = state.items.map((it) => it.event_id);
    state.items = (await api.anomalies(t, FETCH_LIMIT)).items;
    if (ids.length !== state.items.length) state.page = 0;
    state.message = `window ${t} closed`;
  } catch (err) {
    if (err instanceof ApiError) state.message = err.detail;
    else state.message = String(err);
  }
  state.retrainInflight = false;
  draw();
}

function onClick(ev: Event): void {
  const target = (ev.target as HTMLElement).closest<HTMLElement>(
    "[data-action]",
  );
  if (!target || (target as HTMLButtonElement).disabled) return;
  const action = target.dataset.action;
  switch (action) {
    case "refresh":
      void refresh();
      break;
    case "select-window": {
      state.selected = Number(target.dataset.window);
      state.page = 0;
      state.message = "";
      void refresh();
      break;
    }
    case "page-prev":
      state.page = Math.max(0, state.page - 1);
      draw();
      break;
    case "page-next":
      state.page += 1;
      draw();
      break;
    case "verdict": {
      const id = target.dataset.eventId;
      const verdict = target.dataset.verdict;
      if (id && (verdict === "benign" || verdict === "malicious")) {
        void submitVerdict(id, verdict, "");
      }
      break;
    }
    case "retry-verdict": {
      const id = target.dataset.eventId;
      const queued = id ? state.pending.get(id) : undefined;
      if (id && queued) {
        void submitVerdict(id, queued.verdict, queued.note);
      }
      break;
    }
    case "retrain": {
      const t = Number(target.dataset.window);
      if (!state.retrainInflight) void triggerRetrain(t);
      break;
    }
  }
}

root.addEventListener("click", onClick);
void refresh();
