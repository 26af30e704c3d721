import { describe, expect, it } from "vitest";

import {
  renderRanking,
  renderReport,
  scenarioForm,
  staleSnapshotIds,
} from "../src/whatif.js";
import type {
  FeatureSchema,
  ModelSnapshot,
  RankedScenario,
  SensitivityReport,
} from "../src/types.js";
import { fixture } from "./helpers.js";

function snapshotsFixture(): ModelSnapshot[] {
  return fixture<{ snapshots: ModelSnapshot[] }>("snapshots").snapshots;
}

describe("what-if explorer", () => {
  it("renders the recorded report without error", () => {
    const root = document.createElement("div");
    renderReport(root, fixture<SensitivityReport>("whatif_evaluate"), snapshotsFixture());
    expect(root.querySelector(".report-table")).not.toBeNull();
  });

  it("displays every report value exactly as recorded", () => {
    const report = fixture<SensitivityReport>("whatif_evaluate");
    const root = document.createElement("div");
    renderReport(root, report, snapshotsFixture());
    const entries = Object.entries(report.entries);
    expect(entries.length).toBeGreaterThan(0);
    for (const [name, entry] of entries) {
      const row = root.querySelector(`tr[data-entry="${name}"]`)!;
      for (const [cls, value] of [
        ["baseline", entry.baseline_value],
        ["scenario", entry.scenario_value],
        ["delta", entry.delta],
      ] as const) {
        const cell = row.querySelector(`.${cls}`)!;
        expect(cell.getAttribute("data-value")).toBe(String(value));
        expect(cell.textContent).toBe(String(value));
      }
    }
    expect(root.querySelector(".report-meta")!.textContent).toContain(
      `Sample size ${report.sample_size}`,
    );
  });

  it("shows an all-zero delta column for the identity scenario", () => {
    const report = fixture<SensitivityReport>("whatif_evaluate_zero");
    const root = document.createElement("div");
    renderReport(root, report, snapshotsFixture());
    const deltas = root.querySelectorAll("td.delta");
    expect(deltas.length).toBeGreaterThan(0);
    for (const cell of deltas) {
      expect(cell.getAttribute("data-value")).toBe("0");
    }
  });

  it("warns when cited snapshots are no longer current", () => {
    const report = fixture<SensitivityReport>("whatif_evaluate");
    expect(staleSnapshotIds(report, snapshotsFixture())).toEqual([]);
    const cited = Object.values(report.model_snapshot_ids);
    expect(staleSnapshotIds(report, []).sort()).toEqual([...cited].sort());

    const fresh = document.createElement("div");
    renderReport(fresh, report, snapshotsFixture());
    expect(fresh.querySelector(".stale-warning")).toBeNull();
    const stale = document.createElement("div");
    renderReport(stale, report, []);
    expect(stale.querySelector(".stale-warning")).not.toBeNull();
  });

  it("constrains scenario deltas to the recorded feature schema", () => {
    const schema = fixture<FeatureSchema>("feature_schema");
    const handle = scenarioForm(schema, () => {});
    const options = [...handle.element.querySelectorAll(".delta-feature option")].map(
      (o) => o.textContent,
    );
    expect(options).toEqual(schema.features);
  });

  it("builds the evaluate payload from the form fields", () => {
    const schema = fixture<FeatureSchema>("feature_schema");
    const seen: unknown[] = [];
    const handle = scenarioForm(schema, (s) => seen.push(s));
    const form = handle.element;
    (form.querySelector(".scenario-label") as HTMLInputElement).value = "probe";
    (form.querySelector(".sample-size") as HTMLInputElement).value = "50";
    (form.querySelector(".delta-feature") as HTMLSelectElement).value =
      "queued_duration";
    (form.querySelector(".delta-op") as HTMLSelectElement).value = "add";
    (form.querySelector(".delta-value") as HTMLInputElement).value = "0.4";
    form.dispatchEvent(new Event("submit", { cancelable: true }));
    expect(seen).toEqual([
      {
        label: "probe",
        feature_deltas: { queued_duration: { op: "add", value: 0.4 } },
        job_sample_spec: { last_n: 50 },
      },
    ]);
  });

  it("renders the recorded comparison ranking exactly", () => {
    const ranking = fixture<{ ranking: RankedScenario[] }>("whatif_compare").ranking;
    const root = document.createElement("div");
    renderRanking(root, ranking);
    const rows = root.querySelectorAll("tr[data-scenario]");
    expect(rows).toHaveLength(ranking.length);
    ranking.forEach((ranked, i) => {
      const row = rows[i]!;
      expect(row.getAttribute("data-scenario")).toBe(ranked.scenario_id);
      expect(row.querySelector(".rank")!.textContent).toBe(String(ranked.rank));
      expect(row.querySelector(".label")!.textContent).toBe(ranked.label);
      const deltas = row.querySelectorAll("td.delta");
      ["failure_probability", "flaky_probability", "expected_duration"].forEach(
        (name, j) => {
          const entry = ranked.report.entries[name]!;
          expect(deltas[j]!.getAttribute("data-value")).toBe(String(entry.delta));
        },
      );
    });
  });
});
