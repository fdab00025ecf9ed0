// Mirrors of the service payloads. Every number shown in the UI comes from
// these fields; the client computes nothing itself.

export type Phase = "scoring" | "awaiting_review" | "retraining" | "closed";

export type Verdict = "unreviewed" | "benign" | "malicious";

export interface WindowSummary {
  window: number;
  phase: Phase;
  events: number;
  new_entities: Record<string, number>;
  params_in: string;
  params_out: string;
}

export interface RetrainStats {
  epochs_run: number;
  retrain_size: number;
  validation_size: number;
  best_val_loss: number | null;
  final_val_loss: number | null;
  stopped_early: boolean;
  rejected_batches: number;
  drift_old_max: number;
  drift_old_median: number;
  drift_new_max: number;
  drift_new_median: number;
}

export interface WindowDetail extends WindowSummary {
  retrain: RetrainStats | null;
}

export interface TriageItem {
  event_id: string;
  window: number;
  rank: number;
  z: number;
  raw: number;
  p_values: number[];
  timestamp: number;
  event_type: string;
  entities: string[];
  verdict: Verdict;
  note: string;
}

export interface AnomaliesPayload {
  window: number;
  phase: Phase;
  items: TriageItem[];
}

/** Client-side delivery state of a verdict that is not confirmed yet. */
export interface PendingVerdict {
  verdict: "benign" | "malicious";
  note: string;
  state: "saving" | "queued";
}
