// Pure view layer: every function maps service payloads to an HTML string.
// Items render in the order the service returned them; nothing is sorted or
// recomputed here.

import type {
  PendingVerdict,
  Phase,
  RetrainStats,
  TriageItem,
  WindowDetail,
  WindowSummary,
} from "./types.js";

const ESC: Record<string, string> = {
  "&": "&amp;",
  "<": "&lt;",
  ">": "&gt;",
  '"': "&quot;",
  "'": "&#39;",
};

export function escapeHtml(text: string): string {
  return text.replace(/[&<>"']/g, (ch) => ESC[ch] ?? ch);
}

export function fmtScore(z: number): string {
  return z.toFixed(3);
}

export function fmtP(p: number): string {
  if (p === 0) return "0";
  return p < 0.001 ? p.toExponential(1) : p.toFixed(3);
}

export function shortHash(h: string): string {
  const tail = h.startsWith("sha256:") ? h.slice(7) : h;
  return tail ? tail.slice(0, 12) : "-";
}

/** One segment per predicted position; rarer entities draw taller bars.
 * The exact service value rides along in data-p and the tooltip. */
export function pValueBar(pValues: number[]): string {
  const segs = pValues
    .map((p, i) => {
      const surprise = Math.min(-Math.log10(Math.max(p, 1e-12)) / 6, 1);
      const h = 2 + Math.round(surprise * 14);
      const title = `position ${i + 2}: p=${String(p)}`;
      return (
        `<span class="pseg" data-p="${String(p)}" ` +
        `style="height:${h}px" title="${escapeHtml(title)}"></span>`
      );
    })
    .join("");
  const text = pValues.map(fmtP).join(", ");
  return (
    `<span class="pbar">${segs}</span>` +
    `<span class="pvals">${escapeHtml(text)}</span>`
  );
}

function verdictCell(
  item: TriageItem,
  phase: Phase,
  pending: PendingVerdict | undefined,
): string {
  if (pending?.state === "saving") {
    return `<span class="pending">saving...</span>`;
  }
  if (pending?.state === "queued") {
    return (
      `<span class="queued">queued (offline)</span> ` +
      `<button data-action="retry-verdict" data-event-id="${escapeHtml(item.event_id)}">retry</button>`
    );
  }
  if (item.verdict !== "unreviewed") {
    const note = item.note
      ? ` <span class="note" title="${escapeHtml(item.note)}">${escapeHtml(item.note)}</span>`
      : "";
    return `<span class="badge ${item.verdict}">${item.verdict}</span>${note}`;
  }
  if (phase !== "awaiting_review") {
    return `<span class="muted">frozen</span>`;
  }
  const id = escapeHtml(item.event_id);
  return (
    `<button data-action="verdict" data-verdict="benign" data-event-id="${id}">benign</button> ` +
    `<button data-action="verdict" data-verdict="malicious" data-event-id="${id}">malicious</button>`
  );
}

export function renderAnomalyRow(
  item: TriageItem,
  phase: Phase,
  pending?: PendingVerdict,
): string {
  const entities = item.entities.map(escapeHtml).join(" &rarr; ");
  return (
    `<tr data-row="${escapeHtml(item.event_id)}">` +
    `<td class="num">${item.rank}</td>` +
    `<td class="num">${fmtScore(item.z)}</td>` +
    `<td>${escapeHtml(item.event_type)}</td>` +
    `<td class="num">${item.timestamp}</td>` +
    `<td class="entities">${entities}</td>` +
    `<td>${pValueBar(item.p_values)}</td>` +
    `<td class="verdict">${verdictCell(item, phase, pending)}</td>` +
    `</tr>`
  );
}

export interface TableOptions {
  page: number;
  pageSize: number;
  pending: Map<string, PendingVerdict>;
}

export function pageCount(total: number, pageSize: number): number {
  return Math.max(1, Math.ceil(total / pageSize));
}

export function renderAnomalyTable(
  items: TriageItem[],
  phase: Phase,
  opts: TableOptions,
): string {
  if (items.length === 0) {
    return `<div class="empty-state">No anomalies to review in this window.</div>`;
  }
  const pages = pageCount(items.length, opts.pageSize);
  const page = Math.min(Math.max(opts.page, 0), pages - 1);
  const slice = items.slice(page * opts.pageSize, (page + 1) * opts.pageSize);
  const rows = slice
    .map((it) => renderAnomalyRow(it, phase, opts.pending.get(it.event_id)))
    .join("\n");
  const pager =
    pages > 1
      ? `<div class="pager">` +
        `<button data-action="page-prev"${page === 0 ? " disabled" : ""}>prev</button>` +
        `<span>page ${page + 1} of ${pages} (${items.length} events)</span>` +
        `<button data-action="page-next"${page === pages - 1 ? " disabled" : ""}>next</button>` +
        `</div>`
      : "";
  return (
    `<table class="anomalies">` +
    `<thead><tr><th>rank</th><th>z</th><th>type</th><th>time</th>` +
    `<th>entities</th><th>p-values</th><th>verdict</th></tr></thead>` +
    `<tbody>\n${rows}\n</tbody></table>` +
    pager
  );
}

export function renderWindowNav(
  windows: WindowSummary[],
  selected: number | null,
): string {
  const rows = windows
    .map((w) => {
      const cls = w.window === selected ? "win selected" : "win";
      return (
        `<li class="${cls}" data-action="select-window" data-window="${w.window}">` +
        `<span class="idx">window ${w.window}</span>` +
        `<span class="phase ${w.phase}">${w.phase}</span>` +
        `<span class="count">${w.events} events</span>` +
        `</li>`
      );
    })
    .join("\n");
  return `<ul class="windows">\n${rows}\n</ul>`;
}

function driftSummary(stats: RetrainStats): string {
  const loss =
    stats.best_val_loss === null
      ? "no validation split"
      : `validation loss ${stats.best_val_loss.toFixed(6)}` +
        (stats.stopped_early ? " (stopped early)" : "");
  return (
    `<dl class="drift">` +
    `<dt>epochs run</dt><dd>${stats.epochs_run}</dd>` +
    `<dt>retrain set</dt><dd>${stats.retrain_size}</dd>` +
    `<dt>drift (old entities)</dt>` +
    `<dd>max ${stats.drift_old_max.toExponential(3)}, ` +
    `median ${stats.drift_old_median.toExponential(3)}</dd>` +
    `<dt>drift (new entities)</dt>` +
    `<dd>max ${stats.drift_new_max.toExponential(3)}, ` +
    `median ${stats.drift_new_median.toExponential(3)}</dd>` +
    `<dt>fit</dt><dd>${escapeHtml(loss)}</dd>` +
    `</dl>`
  );
}

/** Controls and status for the retrain step of one window. */
export function renderRetrainPanel(
  detail: WindowDetail,
  inflight: boolean,
): string {
  if (inflight || detail.phase === "retraining") {
    return (
      `<div class="retrain-panel">` +
      `<button data-action="retrain" data-window="${detail.window}" disabled>retraining...</button>` +
      `<span class="progress">retraining on reviewed events, controls locked</span>` +
      `</div>`
    );
  }
  switch (detail.phase) {
    case "scoring":
      return `<div class="retrain-panel"><span class="progress">scoring in progress</span></div>`;
    case "awaiting_review":
      return (
        `<div class="retrain-panel">` +
        `<button data-action="retrain" data-window="${detail.window}">close window and retrain</button>` +
        `<span class="hint">events marked malicious are left out of the retrain set</span>` +
        `</div>`
      );
    case "closed":
      return (
        `<div class="retrain-panel closed">` +
        `<span class="badge closed">closed</span>` +
        (detail.retrain ? driftSummary(detail.retrain) : "") +
        `</div>`
      );
  }
}

export function renderWindowMeta(detail: WindowDetail): string {
  const fresh = Object.entries(detail.new_entities ?? {})
    .map(([k, v]) => `${escapeHtml(k)}: ${v}`)
    .join(", ");
  return (
    `<dl class="meta">` +
    `<dt>events</dt><dd>${detail.events}</dd>` +
    `<dt>new entities</dt><dd>${fresh || "none"}</dd>` +
    `<dt>params in</dt><dd class="hash">${escapeHtml(shortHash(detail.params_in))}</dd>` +
    `<dt>params out</dt><dd class="hash">${escapeHtml(shortHash(detail.params_out))}</dd>` +
    `</dl>`
  );
}

export interface AppView {
  windows: WindowSummary[];
  selected: number | null;
  detail: WindowDetail | null;
  items: TriageItem[];
  page: number;
  pageSize: number;
  pending: Map<string, PendingVerdict>;
  retrainInflight: boolean;
  message: string;
}

export function renderApp(view: AppView): string {
  const side = renderWindowNav(view.windows, view.selected);
  let main = `<div class="empty-state">Select a window.</div>`;
  if (view.detail) {
    const phase: Phase = view.retrainInflight ? "retraining" : view.detail.phase;
    main =
      `<h2>window ${view.detail.window}</h2>` +
      renderWindowMeta(view.detail) +
      renderRetrainPanel(view.detail, view.retrainInflight) +
      (view.message ? `<div class="message">${escapeHtml(view.message)}</div>` : "") +
      (view.detail.phase === "scoring"
        ? `<div class="empty-state">Ranked anomalies appear once scoring finishes.</div>`
        : renderAnomalyTable(view.items, phase, {
            page: view.page,
            pageSize: view.pageSize,
            pending: view.pending,
          }));
  }
  return (
    `<header><h1>anomstream triage</h1>` +
    `<button data-action="refresh">refresh</button></header>` +
    `<div class="layout"><nav>${side}</nav><main>${main}</main></div>`
  );
}
