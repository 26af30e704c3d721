// JSON payload shapes of the twin's HTTP API. The console renders these
// verbatim; it never derives metric values of its own.

export interface MetricSnapshot {
  scope: number[] | null;
  window_start: string;
  window_end: string;
  interval: string;
  executions_frequency: number;
  mean_duration: number | null;
  failure_ratio: number | null;
  flaky_failure_ratio: number | null;
}

export type MetricName =
  | "executions_frequency"
  | "mean_duration"
  | "failure_ratio"
  | "flaky_failure_ratio";

export const METRIC_NAMES: MetricName[] = [
  "executions_frequency",
  "mean_duration",
  "failure_ratio",
  "flaky_failure_ratio",
];

export const METRIC_TITLES: Record<MetricName, string> = {
  executions_frequency: "Executions",
  mean_duration: "Mean duration (s)",
  failure_ratio: "Failure ratio",
  flaky_failure_ratio: "Flaky failure ratio",
};

export const INTERVALS = ["hourly", "daily", "weekly", "monthly", "yearly"];

export interface ProjectInfo {
  project_id: number;
  path: string;
  default_ref: string;
}

export interface AlertRule {
  rule_id: string;
  metric: MetricName;
  scope: number[] | null;
  interval: string;
  comparator: ">" | "<" | ">=" | "<=";
  threshold: number;
  sink: string;
  webhook_url: string | null;
}

export interface PredictionRecord {
  prediction_id: string;
  job_id: number;
  model_kind: "duration" | "failure" | "flaky";
  predicted_value: number;
  predicted_at: string;
  model_snapshot_id: string | null;
  actual_value: number | null;
  anomaly: boolean | null;
  anomaly_score: number | null;
}

export interface ModelSnapshot {
  model_snapshot_id: string;
  model_kind: string;
  scope: string;
  parameters: Record<string, unknown>;
  trained_on_count: number;
  created_at: string;
}

export interface FeatureSchema {
  version: string;
  features: string[];
}

export interface FeatureDelta {
  op: "add" | "set";
  value: number;
}

export interface ScenarioBody {
  scenario_id?: string;
  label: string;
  feature_deltas: Record<string, FeatureDelta>;
  job_sample_spec?: { scope?: number[] | null; last_n?: number };
}

export interface SensitivityEntry {
  baseline_value: number;
  scenario_value: number;
  delta: number;
}

export interface SensitivityReport {
  scenario_id: string;
  model_snapshot_ids: Record<string, string>;
  entries: Record<string, SensitivityEntry>;
  sample_size: number;
}

export interface RankedScenario {
  rank: number;
  scenario_id: string;
  label: string;
  report: SensitivityReport;
}

export type ActionStatus =
  | "proposed"
  | "approved"
  | "applied"
  | "rejected"
  | "failed";

export interface ImprovementAction {
  action_id: string;
  kind: string;
  target: { project_id: number; job_id: number | null };
  payload: Record<string, unknown>;
  status: ActionStatus;
  created_at: string;
  error: string | null;
  apply_result: string | null;
}

export interface ErrorEnvelope {
  code: string;
  message: string;
  details: Record<string, unknown>;
}
