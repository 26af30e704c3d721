import { clear, el, verbatim } from "./format.js";
import type {
  FeatureDelta,
  FeatureSchema,
  ModelSnapshot,
  RankedScenario,
  ScenarioBody,
  SensitivityReport,
} from "./types.js";

const STORAGE_KEY = "buildtwin.scenarios";

export function loadSavedScenarios(): ScenarioBody[] {
  try {
    const raw = localStorage.getItem(STORAGE_KEY);
    return raw ? (JSON.parse(raw) as ScenarioBody[]) : [];
  } catch {
    return [];
  }
}

export function saveScenario(scenario: ScenarioBody): ScenarioBody[] {
  const saved = loadSavedScenarios().filter((s) => s.label !== scenario.label);
  saved.push(scenario);
  localStorage.setItem(STORAGE_KEY, JSON.stringify(saved));
  return saved;
}

/**
 * Snapshot ids cited by a report that are no longer current. Non-empty
 * means the models moved on since the evaluation: show a staleness warning.
 */
export function staleSnapshotIds(
  report: SensitivityReport,
  current: ModelSnapshot[],
): string[] {
  const live = new Set(current.map((s) => s.model_snapshot_id));
  return Object.values(report.model_snapshot_ids).filter((id) => !live.has(id));
}

export interface ScenarioFormHandle {
  element: HTMLElement;
  scenario(): ScenarioBody;
}

/** Delta rows constrained to the feature names the API declares. */
export function scenarioForm(
  schema: FeatureSchema,
  onEvaluate: (s: ScenarioBody) => void,
): ScenarioFormHandle {
  const rows = el("div", { class: "delta-rows" });

  const addRow = () => {
    const feature = el("select", { class: "delta-feature" });
    for (const name of schema.features) {
      feature.append(el("option", { value: name }, [name]));
    }
    const op = el("select", { class: "delta-op" }, []);
    op.append(el("option", { value: "add" }, ["add"]));
    op.append(el("option", { value: "set" }, ["set"]));
    const value = el("input", {
      class: "delta-value",
      type: "number",
      step: "any",
      value: "0",
    });
    const remove = el("button", { type: "button", class: "remove-delta" }, ["×"]);
    const row = el("div", { class: "delta-row" }, [feature, op, value, remove]);
    remove.addEventListener("click", () => row.remove());
    rows.append(row);
  };
  addRow();

  const label = el("input", {
    class: "scenario-label",
    type: "text",
    value: "scenario",
  });
  const sample = el("input", {
    class: "sample-size",
    type: "number",
    min: "1",
    value: "200",
  });
  const addBtn = el("button", { type: "button", class: "add-delta" }, [
    "Add delta",
  ]);
  addBtn.addEventListener("click", addRow);

  const form = el("form", { class: "scenario-form" }, [
    el("label", {}, ["Label ", label]),
    el("label", {}, ["Sample size ", sample]),
    rows,
    addBtn,
    el("button", { type: "submit", class: "evaluate" }, ["Evaluate"]),
  ]);

  const scenario = (): ScenarioBody => {
    const deltas: Record<string, FeatureDelta> = {};
    for (const row of rows.querySelectorAll(".delta-row")) {
      const feature = (row.querySelector(".delta-feature") as HTMLSelectElement).value;
      const op = (row.querySelector(".delta-op") as HTMLSelectElement).value as
        | "add"
        | "set";
      const value = Number(
        (row.querySelector(".delta-value") as HTMLInputElement).value,
      );
      deltas[feature] = { op, value };
    }
    return {
      label: label.value || "scenario",
      feature_deltas: deltas,
      job_sample_spec: { last_n: Number(sample.value) || 200 },
    };
  };

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    onEvaluate(scenario());
  });

  return { element: form, scenario };
}

const ENTRY_TITLES: Record<string, string> = {
  failure_probability: "Failure probability",
  flaky_probability: "Flaky probability",
  expected_duration: "Expected duration (s)",
};

export function renderReport(
  root: HTMLElement,
  report: SensitivityReport,
  currentSnapshots: ModelSnapshot[],
): void {
  clear(root);
  const stale = staleSnapshotIds(report, currentSnapshots);
  if (stale.length > 0) {
    root.append(
      el("div", { class: "stale-warning", role: "alert" }, [
        `Stale: snapshot ${stale.join(", ")} superseded since this evaluation; re-run for current numbers.`,
      ]),
    );
  }

  const head = el("tr", {}, [
    el("th", {}, ["Output"]),
    el("th", {}, ["Baseline"]),
    el("th", {}, ["Scenario"]),
    el("th", {}, ["Delta"]),
  ]);
  const table = el("table", { class: "report-table" }, [head]);
  for (const [name, entry] of Object.entries(report.entries)) {
    table.append(
      el("tr", { "data-entry": name }, [
        el("td", {}, [ENTRY_TITLES[name] ?? name]),
        el("td", { class: "baseline", "data-value": String(entry.baseline_value) }, [
          verbatim(entry.baseline_value),
        ]),
        el("td", { class: "scenario", "data-value": String(entry.scenario_value) }, [
          verbatim(entry.scenario_value),
        ]),
        el("td", { class: "delta", "data-value": String(entry.delta) }, [
          verbatim(entry.delta),
        ]),
      ]),
    );
  }
  root.append(table);
  root.append(
    el("p", { class: "report-meta" }, [
      `Sample size ${report.sample_size}; snapshots ` +
        Object.entries(report.model_snapshot_ids)
          .map(([kind, id]) => `${kind}=${id}`)
          .join(", "),
    ]),
  );
}

export function renderRanking(root: HTMLElement, ranking: RankedScenario[]): void {
  clear(root);
  const head = el("tr", {}, [
    el("th", {}, ["Rank"]),
    el("th", {}, ["Scenario"]),
    el("th", {}, ["Failure probability Δ"]),
    el("th", {}, ["Flaky probability Δ"]),
    el("th", {}, ["Expected duration Δ"]),
  ]);
  const table = el("table", { class: "ranking-table" }, [head]);
  for (const ranked of ranking) {
    const cells = [
      el("td", { class: "rank" }, [String(ranked.rank)]),
      el("td", { class: "label" }, [ranked.label]),
    ];
    for (const name of [
      "failure_probability",
      "flaky_probability",
      "expected_duration",
    ]) {
      const entry = ranked.report.entries[name];
      cells.push(
        el(
          "td",
          { class: "delta", "data-value": entry ? String(entry.delta) : "" },
          [entry ? verbatim(entry.delta) : "n/a"],
        ),
      );
    }
    table.append(el("tr", { "data-scenario": ranked.scenario_id }, cells));
  }
  root.append(table);
}
