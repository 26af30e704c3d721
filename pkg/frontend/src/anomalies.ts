import { clear, el, verbatim } from "./format.js";
import type { PredictionRecord } from "./types.js";

export function renderAnomalies(root: HTMLElement, records: PredictionRecord[]): void {
  clear(root);
  if (records.length === 0) {
    root.append(el("p", { class: "empty-state" }, ["No anomalies recorded."]));
    return;
  }
  const head = el("tr", {}, [
    el("th", {}, ["When"]),
    el("th", {}, ["Job"]),
    el("th", {}, ["Model"]),
    el("th", {}, ["Predicted"]),
    el("th", {}, ["Actual"]),
    el("th", {}, ["Score"]),
  ]);
  const table = el("table", { class: "anomaly-table" }, [head]);
  for (const r of records) {
    table.append(
      el("tr", { "data-prediction-id": r.prediction_id }, [
        el("td", {}, [r.predicted_at]),
        el("td", {}, [String(r.job_id)]),
        el("td", {}, [r.model_kind]),
        el("td", { class: "predicted", "data-value": String(r.predicted_value) }, [
          verbatim(r.predicted_value),
        ]),
        el("td", { class: "actual", "data-value": r.actual_value === null ? "" : String(r.actual_value) }, [
          verbatim(r.actual_value),
        ]),
        el("td", { class: "score", "data-value": r.anomaly_score === null ? "" : String(r.anomaly_score) }, [
          verbatim(r.anomaly_score),
        ]),
      ]),
    );
  }
  root.append(table);
}
