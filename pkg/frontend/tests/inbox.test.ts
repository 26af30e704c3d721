import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { renderInbox, type ActionVerb } from "../src/inbox.js";
import type { ImprovementAction } from "../src/types.js";
import { fixture } from "./helpers.js";

function actionsFixture(): ImprovementAction[] {
  return fixture<{ actions: ImprovementAction[] }>("actions").actions;
}

function flush(): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, 0));
}

describe("action inbox", () => {
  it("renders every recorded action with its status exactly", () => {
    const actions = actionsFixture();
    const root = document.createElement("div");
    renderInbox(root, actions, { onVerb: async () => {} });
    const rows = root.querySelectorAll("tr.action-row");
    expect(rows).toHaveLength(actions.length);
    actions.forEach((action, i) => {
      const row = rows[i]!;
      expect(row.getAttribute("data-action-id")).toBe(action.action_id);
      expect(row.querySelector(".kind")!.textContent).toBe(action.kind);
      expect(row.querySelector(".chip")!.getAttribute("data-status")).toBe(
        action.status,
      );
      expect(row.querySelector(".chip")!.textContent).toBe(action.status);
      expect(row.querySelector(".created")!.textContent).toBe(action.created_at);
    });
  });

  it("offers verbs matching the action status", () => {
    const actions = actionsFixture();
    const root = document.createElement("div");
    renderInbox(root, actions, { onVerb: async () => {} });
    for (const action of actions) {
      const verbs = [
        ...root.querySelectorAll(`tr[data-action-id="${action.action_id}"] .verb`),
      ].map((b) => b.textContent);
      if (action.status === "proposed") expect(verbs).toEqual(["approve", "reject"]);
      else if (action.status === "approved") expect(verbs).toEqual(["apply"]);
      else expect(verbs).toEqual([]);
    }
  });

  it("issues exactly one approve call per click", async () => {
    const actions = actionsFixture();
    const target = actions.find((a) => a.status === "proposed")!;
    const calls: [string, ActionVerb][] = [];
    let release!: () => void;
    const gate = new Promise<void>((resolve) => (release = resolve));

    const root = document.createElement("div");
    renderInbox(root, actions, {
      onVerb: (id, verb) => {
        calls.push([id, verb]);
        return gate;
      },
    });
    const button = root.querySelector(
      `tr[data-action-id="${target.action_id}"] .verb-approve`,
    ) as HTMLButtonElement;

    button.click();
    expect(calls).toEqual([[target.action_id, "approve"]]);

    // a double click lands while the first request is still in flight
    button.click();
    button.click();
    expect(calls).toHaveLength(1);

    release();
    await flush();
    expect(button.disabled).toBe(false);
    button.click();
    expect(calls).toHaveLength(2);
  });

  it("sends one POST to the approve endpoint through the API client", async () => {
    const actions = actionsFixture();
    const target = actions.find((a) => a.status === "proposed")!;
    const requests: [string, string | undefined][] = [];
    const api = new ApiClient("", async (input, init) => {
      requests.push([input, init?.method]);
      return new Response(JSON.stringify(fixture("action_approve")), {
        status: 200,
        headers: { "Content-Type": "application/json" },
      });
    });

    const root = document.createElement("div");
    renderInbox(root, actions, {
      onVerb: async (id, verb) => {
        await api.actionVerb(id, verb);
      },
    });
    const button = root.querySelector(
      `tr[data-action-id="${target.action_id}"] .verb-approve`,
    ) as HTMLButtonElement;
    button.click();
    await flush();
    expect(requests).toEqual([[`/actions/${target.action_id}/approve`, "POST"]]);
  });

  it("shows the empty state when there are no actions", () => {
    const root = document.createElement("div");
    renderInbox(root, [], { onVerb: async () => {} });
    expect(root.querySelector(".empty-state")).not.toBeNull();
    expect(root.querySelector(".inbox-table")).toBeNull();
  });
});
