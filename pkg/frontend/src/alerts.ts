import { clear, el } from "./format.js";
import { METRIC_NAMES, type AlertRule } from "./types.js";

export interface AlertHandlers {
  onCreate: (rule: Omit<AlertRule, "rule_id">) => Promise<void>;
  onDelete: (ruleId: string) => Promise<void>;
}

export function renderAlerts(
  root: HTMLElement,
  rules: AlertRule[],
  handlers: AlertHandlers,
): void {
  clear(root);

  const head = el("tr", {}, [
    el("th", {}, ["Rule"]),
    el("th", {}, ["Condition"]),
    el("th", {}, ["Interval"]),
    el("th", {}, ["Scope"]),
    el("th", {}, ["Sink"]),
    el("th", {}, [""]),
  ]);
  const table = el("table", { class: "alerts-table" }, [head]);
  for (const rule of rules) {
    const remove = el("button", { type: "button", class: "delete-rule" }, [
      "delete",
    ]);
    remove.addEventListener("click", () => {
      remove.disabled = true;
      void handlers.onDelete(rule.rule_id).finally(() => {
        remove.disabled = false;
      });
    });
    table.append(
      el("tr", { "data-rule-id": rule.rule_id, id: `rule-${rule.rule_id}` }, [
        el("td", {}, [rule.rule_id]),
        el("td", { class: "condition" }, [
          `${rule.metric} ${rule.comparator} ${rule.threshold}`,
        ]),
        el("td", {}, [rule.interval]),
        el("td", {}, [rule.scope === null ? "all" : rule.scope.join(",")]),
        el("td", {}, [rule.sink]),
        el("td", {}, [remove]),
      ]),
    );
  }
  if (rules.length === 0) {
    root.append(el("p", { class: "empty-state" }, ["No alert rules."]));
  } else {
    root.append(table);
  }

  const metric = el("select", { class: "rule-metric" });
  for (const name of METRIC_NAMES) metric.append(el("option", { value: name }, [name]));
  const comparator = el("select", { class: "rule-comparator" });
  for (const c of [">", "<", ">=", "<="]) comparator.append(el("option", { value: c }, [c]));
  const threshold = el("input", {
    class: "rule-threshold",
    type: "number",
    step: "any",
    value: "0.5",
  });
  const interval = el("select", { class: "rule-interval" });
  for (const i of ["hourly", "daily", "weekly", "monthly", "yearly"]) {
    interval.append(el("option", { value: i }, [i]));
  }
  const scope = el("input", {
    class: "rule-scope",
    type: "text",
    placeholder: "project ids, empty = all",
  });

  const form = el("form", { class: "rule-form" }, [
    el("label", {}, ["Metric ", metric]),
    el("label", {}, ["Comparator ", comparator]),
    el("label", {}, ["Threshold ", threshold]),
    el("label", {}, ["Interval ", interval]),
    el("label", {}, ["Scope ", scope]),
    el("button", { type: "submit", class: "create-rule" }, ["Create rule"]),
  ]);
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const ids = scope.value.split(",").map((s) => s.trim()).filter(Boolean);
    void handlers.onCreate({
      metric: metric.value as AlertRule["metric"],
      comparator: comparator.value as AlertRule["comparator"],
      threshold: Number(threshold.value),
      interval: interval.value,
      scope: ids.length > 0 ? ids.map(Number) : null,
      sink: "log",
      webhook_url: null,
    });
  });
  root.append(form);
}
