import { lineChart } from "./chart.js";
import { clear, el, verbatim } from "./format.js";
import {
  METRIC_NAMES,
  METRIC_TITLES,
  type AlertRule,
  type MetricName,
  type MetricSnapshot,
} from "./types.js";

// 10-minute long-build baseline drawn on the duration chart.
export const DURATION_BASELINE_SECONDS = 600;

export interface DashboardState {
  interval: string;
  scope: string; // "" = all projects, else comma-separated ids
  windowEnd: Date;
}

const WINDOW_COUNTS: Record<string, number> = {
  hourly: 24,
  daily: 14,
  weekly: 8,
  monthly: 6,
  yearly: 3,
};

function alignDown(date: Date, interval: string): Date {
  const d = new Date(date.getTime());
  d.setUTCMinutes(0, 0, 0);
  if (interval === "hourly") return d;
  d.setUTCHours(0);
  if (interval === "daily") return d;
  if (interval === "weekly") {
    d.setUTCDate(d.getUTCDate() - ((d.getUTCDay() + 6) % 7));
    return d;
  }
  d.setUTCDate(1);
  if (interval === "monthly") return d;
  d.setUTCMonth(0);
  return d;
}

function addInterval(date: Date, interval: string, count: number): Date {
  const d = new Date(date.getTime());
  if (interval === "hourly") d.setUTCHours(d.getUTCHours() + count);
  else if (interval === "daily") d.setUTCDate(d.getUTCDate() + count);
  else if (interval === "weekly") d.setUTCDate(d.getUTCDate() + 7 * count);
  else if (interval === "monthly") d.setUTCMonth(d.getUTCMonth() + count);
  else d.setUTCFullYear(d.getUTCFullYear() + count);
  return d;
}

/** Aligned [from, to) covering the trailing windows up to state.windowEnd. */
export function windowRange(state: DashboardState): { from: string; to: string } {
  const to = addInterval(alignDown(state.windowEnd, state.interval), state.interval, 1);
  const from = addInterval(to, state.interval, -(WINDOW_COUNTS[state.interval] ?? 24));
  return { from: from.toISOString(), to: to.toISOString() };
}

function comparatorHolds(cmp: AlertRule["comparator"], value: number, threshold: number): boolean {
  if (cmp === ">") return value > threshold;
  if (cmp === "<") return value < threshold;
  if (cmp === ">=") return value >= threshold;
  return value <= threshold;
}

function scopeKey(scope: number[] | null | string): string {
  const ids =
    typeof scope === "string"
      ? scope.split(",").filter(Boolean).map(Number)
      : (scope ?? []);
  return [...ids].sort((a, b) => a - b).join(",");
}

/**
 * Rules matching the displayed interval/scope whose comparator holds on the
 * newest displayed window. Values come from the API; the console only
 * mirrors the rule's comparator.
 */
export function trippedRules(
  rules: AlertRule[],
  series: MetricSnapshot[],
  state: Pick<DashboardState, "interval" | "scope">,
): { rule: AlertRule; value: number }[] {
  const newest = series[series.length - 1];
  if (!newest) return [];
  const out: { rule: AlertRule; value: number }[] = [];
  for (const rule of rules) {
    if (rule.interval !== state.interval) continue;
    if (scopeKey(rule.scope) !== scopeKey(state.scope)) continue;
    const value = newest[rule.metric];
    if (value !== null && comparatorHolds(rule.comparator, value, rule.threshold)) {
      out.push({ rule, value });
    }
  }
  return out;
}

function metricCard(metric: MetricName, series: MetricSnapshot[]): HTMLElement {
  const points = series.map((s) => ({
    label: s.window_start,
    value: s[metric],
  }));
  const newest = series[series.length - 1];
  const latest = newest ? newest[metric] : null;
  const card = el("section", { class: "metric-card", "data-metric": metric }, [
    el("h3", {}, [METRIC_TITLES[metric]]),
    el(
      "p",
      { class: "latest", "data-value": latest === null ? "" : String(latest) },
      [verbatim(latest)],
    ),
  ]);
  const chart = lineChart(
    points,
    metric === "mean_duration"
      ? {
          referenceValue: DURATION_BASELINE_SECONDS,
          referenceLabel: `${DURATION_BASELINE_SECONDS}s baseline`,
        }
      : {},
  );
  card.append(chart);
  return card;
}

export function renderDashboard(
  root: HTMLElement,
  data: { series: MetricSnapshot[]; rules: AlertRule[] },
  state: Pick<DashboardState, "interval" | "scope">,
): void {
  clear(root);
  for (const { rule, value } of trippedRules(data.rules, data.series, state)) {
    const link = el("a", { href: "#alerts", "data-rule-id": rule.rule_id }, [
      `rule ${rule.rule_id}`,
    ]);
    root.append(
      el("div", { class: "alert-banner", role: "alert" }, [
        `Alert: ${rule.metric} ${rule.comparator} ${rule.threshold} ` +
          `(latest ${value}) `,
        link,
      ]),
    );
  }

  const total = data.series.reduce((n, s) => n + s.executions_frequency, 0);
  if (data.series.length === 0 || total === 0) {
    root.append(
      el("p", { class: "empty-state" }, [
        "No executions in the selected window.",
      ]),
    );
    return;
  }

  const grid = el("div", { class: "metric-grid" });
  for (const metric of METRIC_NAMES) {
    grid.append(metricCard(metric, data.series));
  }
  root.append(grid);
}
