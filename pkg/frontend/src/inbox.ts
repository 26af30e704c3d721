import { clear, el } from "./format.js";
import type { ActionStatus, ImprovementAction } from "./types.js";

export type ActionVerb = "approve" | "reject" | "apply";

export interface InboxHandlers {
  /** Must issue exactly one POST; called once per button click. */
  onVerb: (actionId: string, verb: ActionVerb) => Promise<void>;
}

const VERBS_BY_STATUS: Partial<Record<ActionStatus, ActionVerb[]>> = {
  proposed: ["approve", "reject"],
  approved: ["apply"],
};

function describeTarget(action: ImprovementAction): string {
  const t = action.target;
  return t.job_id === null
    ? `project ${t.project_id}`
    : `project ${t.project_id} / job ${t.job_id}`;
}

function actionRow(action: ImprovementAction, handlers: InboxHandlers): HTMLElement {
  const row = el("tr", { class: "action-row", "data-action-id": action.action_id });
  row.append(
    el("td", { class: "kind" }, [action.kind]),
    el("td", { class: "target" }, [describeTarget(action)]),
    el("td", {}, [
      el("span", { class: `chip chip-${action.status}`, "data-status": action.status }, [
        action.status,
      ]),
    ]),
    el("td", { class: "created" }, [action.created_at]),
    el("td", { class: "result" }, [action.apply_result ?? action.error ?? ""]),
  );

  const buttons = el("td", { class: "verbs" });
  for (const verb of VERBS_BY_STATUS[action.status] ?? []) {
    const button = el("button", { type: "button", class: `verb verb-${verb}` }, [
      verb,
    ]);
    button.addEventListener("click", () => {
      // Disable before the request so a double click cannot issue a second
      // POST; the row is re-rendered from the response afterwards.
      if (button.disabled) return;
      button.disabled = true;
      void handlers.onVerb(action.action_id, verb).finally(() => {
        button.disabled = false;
      });
    });
    buttons.append(button);
  }
  row.append(buttons);
  return row;
}

export function renderInbox(
  root: HTMLElement,
  actions: ImprovementAction[],
  handlers: InboxHandlers,
): void {
  clear(root);
  if (actions.length === 0) {
    root.append(el("p", { class: "empty-state" }, ["No improvement actions."]));
    return;
  }
  const head = el("tr", {}, [
    el("th", {}, ["Kind"]),
    el("th", {}, ["Target"]),
    el("th", {}, ["Status"]),
    el("th", {}, ["Created"]),
    el("th", {}, ["Result"]),
    el("th", {}, [""]),
  ]);
  const table = el("table", { class: "inbox-table" }, [head]);
  for (const action of actions) {
    table.append(actionRow(action, handlers));
  }
  root.append(table);
}
