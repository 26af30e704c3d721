import { ApiClient, ApiError } from "./api.js";
import { renderAlerts } from "./alerts.js";
import { renderAnomalies } from "./anomalies.js";
import { renderDashboard, windowRange, type DashboardState } from "./dashboard.js";
import { clear, el } from "./format.js";
import { renderInbox } from "./inbox.js";
import { INTERVALS, type ProjectInfo, type ScenarioBody } from "./types.js";
import {
  loadSavedScenarios,
  renderRanking,
  renderReport,
  saveScenario,
  scenarioForm,
} from "./whatif.js";

const TABS = ["dashboard", "whatif", "actions", "alerts", "anomalies"] as const;
type Tab = (typeof TABS)[number];

const TAB_TITLES: Record<Tab, string> = {
  dashboard: "Dashboard",
  whatif: "What-if",
  actions: "Actions",
  alerts: "Alerts",
  anomalies: "Anomalies",
};

export class App {
  private tab: Tab = "dashboard";
  private dashboardState: DashboardState = {
    interval: "hourly",
    scope: "",
    windowEnd: new Date(),
  };
  private pollSeconds = 10;
  private timer: ReturnType<typeof setInterval> | null = null;
  private offline = false;
  private lastScenario: ScenarioBody | null = null;

  private banner!: HTMLElement;
  private nav!: HTMLElement;
  private controls!: HTMLElement;
  private view!: HTMLElement;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
  ) {}

  start(): void {
    clear(this.root);
    this.banner = el("div", { class: "banner-slot" });
    this.nav = el("nav", { class: "tabs" });
    this.controls = el("div", { class: "controls" });
    this.view = el("main", { class: "view" });
    this.root.append(
      el("header", { class: "topbar" }, [
        el("h1", {}, ["Build twin console"]),
        this.nav,
      ]),
      this.banner,
      this.controls,
      this.view,
    );

    for (const tab of TABS) {
      const link = el("a", { href: `#${tab}`, class: "tab", "data-tab": tab }, [
        TAB_TITLES[tab],
      ]);
      this.nav.append(link);
    }
    window.addEventListener("hashchange", () => this.onHashChange());
    this.onHashChange();
    this.schedule();
  }

  private schedule(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = setInterval(() => void this.refresh(), this.pollSeconds * 1000);
  }

  private onHashChange(): void {
    const hash = location.hash.replace("#", "") as Tab;
    this.tab = TABS.includes(hash) ? hash : "dashboard";
    for (const link of this.nav.querySelectorAll(".tab")) {
      link.classList.toggle(
        "active",
        link.getAttribute("data-tab") === this.tab,
      );
    }
    this.buildControls();
    void this.refresh();
  }

  private setOffline(offline: boolean, detail = ""): void {
    this.offline = offline;
    clear(this.banner);
    if (!offline) return;
    const retry = el("button", { type: "button", class: "retry" }, ["Retry"]);
    retry.addEventListener("click", () => void this.refresh());
    this.banner.append(
      el("div", { class: "offline-banner", role: "alert" }, [
        `Connection to the twin lost${detail ? ` (${detail})` : ""}. Showing the last loaded data. `,
        retry,
      ]),
    );
  }

  private showError(err: unknown): void {
    if (err instanceof ApiError) {
      this.banner.append(
        el("div", { class: "error-banner", role: "alert" }, [
          `${err.envelope.code}: ${err.envelope.message}`,
        ]),
      );
    } else {
      this.setOffline(true, err instanceof Error ? err.message : "");
    }
  }

  private buildControls(): void {
    clear(this.controls);
    const poll = el("input", {
      type: "number",
      min: "1",
      value: String(this.pollSeconds),
      class: "poll-seconds",
    });
    poll.addEventListener("change", () => {
      const v = Number(poll.value);
      if (v >= 1) {
        this.pollSeconds = v;
        this.schedule();
      }
    });
    this.controls.append(el("label", {}, ["Refresh every (s) ", poll]));

    if (this.tab !== "dashboard") return;

    const interval = el("select", { class: "interval-select" });
    for (const name of INTERVALS) {
      const opt = el("option", { value: name }, [name]);
      if (name === this.dashboardState.interval) opt.setAttribute("selected", "");
      interval.append(opt);
    }
    interval.addEventListener("change", () => {
      this.dashboardState.interval = interval.value;
      void this.refresh();
    });

    const scope = el("select", { class: "scope-select" });
    scope.append(el("option", { value: "" }, ["all projects"]));
    scope.addEventListener("change", () => {
      this.dashboardState.scope = scope.value;
      void this.refresh();
    });
    void this.api
      .projects()
      .then(({ projects }: { projects: ProjectInfo[] }) => {
        for (const p of projects) {
          const opt = el("option", { value: String(p.project_id) }, [
            p.path || `project ${p.project_id}`,
          ]);
          if (String(p.project_id) === this.dashboardState.scope) {
            opt.setAttribute("selected", "");
          }
          scope.append(opt);
        }
      })
      .catch(() => undefined);

    const windowEnd = el("input", {
      type: "datetime-local",
      class: "window-end",
      value: this.dashboardState.windowEnd.toISOString().slice(0, 16),
    });
    windowEnd.addEventListener("change", () => {
      const parsed = new Date(windowEnd.value + "Z");
      if (!Number.isNaN(parsed.getTime())) {
        this.dashboardState.windowEnd = parsed;
        void this.refresh();
      }
    });

    this.controls.append(
      el("label", {}, ["Interval ", interval]),
      el("label", {}, ["Scope ", scope]),
      el("label", {}, ["Window end (UTC) ", windowEnd]),
    );
  }

  async refresh(): Promise<void> {
    try {
      if (this.tab === "dashboard") await this.refreshDashboard();
      else if (this.tab === "whatif") await this.refreshWhatIf();
      else if (this.tab === "actions") await this.refreshActions();
      else if (this.tab === "alerts") await this.refreshAlerts();
      else await this.refreshAnomalies();
      if (this.offline) this.setOffline(false);
    } catch (err) {
      this.showError(err);
    }
  }

  private async refreshDashboard(): Promise<void> {
    const { from, to } = windowRange(this.dashboardState);
    const [{ series }, { rules }] = await Promise.all([
      this.api.metricsSeries({
        interval: this.dashboardState.interval,
        from,
        to,
        scope: this.dashboardState.scope || undefined,
      }),
      this.api.alerts(),
    ]);
    renderDashboard(this.view, { series, rules }, this.dashboardState);
  }

  private async refreshWhatIf(): Promise<void> {
    const [schema, { snapshots }] = await Promise.all([
      this.api.featureSchema(),
      this.api.snapshots(),
    ]);
    clear(this.view);
    if (snapshots.length === 0) {
      this.view.append(
        el("p", { class: "empty-state" }, [
          "No model snapshots yet; the twin needs observed jobs first.",
        ]),
      );
      return;
    }

    const reportSlot = el("div", { class: "report-slot" });
    const rankingSlot = el("div", { class: "ranking-slot" });
    const savedSlot = el("div", { class: "saved-slot" });

    const form = scenarioForm(schema, (scenario) => {
      this.lastScenario = scenario;
      void this.api
        .whatifEvaluate(scenario)
        .then(async (report) => {
          const { snapshots: current } = await this.api.snapshots();
          renderReport(reportSlot, report, current);
        })
        .catch((err) => this.showError(err));
    });

    const save = el("button", { type: "button", class: "save-scenario" }, [
      "Save scenario",
    ]);
    save.addEventListener("click", () => {
      if (this.lastScenario) {
        saveScenario(this.lastScenario);
        renderSaved();
      }
    });

    const renderSaved = () => {
      clear(savedSlot);
      const saved = loadSavedScenarios();
      if (saved.length === 0) return;
      const list = el("ul", { class: "saved-list" });
      for (const s of saved) {
        list.append(el("li", {}, [s.label]));
      }
      const compare = el("button", { type: "button", class: "compare" }, [
        "Compare saved",
      ]);
      compare.addEventListener("click", () => {
        void this.api
          .whatifCompare({ scenarios: saved })
          .then(({ ranking }) => renderRanking(rankingSlot, ranking))
          .catch((err) => this.showError(err));
      });
      savedSlot.append(el("h3", {}, ["Saved scenarios"]), list, compare);
    };
    renderSaved();

    this.view.append(form.element, save, reportSlot, savedSlot, rankingSlot);
  }

  private async refreshActions(): Promise<void> {
    const { actions } = await this.api.actions();
    renderInbox(this.view, actions, {
      onVerb: async (actionId, verb) => {
        try {
          await this.api.actionVerb(actionId, verb);
        } catch (err) {
          this.showError(err);
        }
        await this.refreshActions();
      },
    });
  }

  private async refreshAlerts(): Promise<void> {
    const { rules } = await this.api.alerts();
    renderAlerts(this.view, rules, {
      onCreate: async (rule) => {
        try {
          await this.api.createAlert(rule);
        } catch (err) {
          this.showError(err);
        }
        await this.refreshAlerts();
      },
      onDelete: async (ruleId) => {
        try {
          await this.api.deleteAlert(ruleId);
        } catch (err) {
          this.showError(err);
        }
        await this.refreshAlerts();
      },
    });
  }

  private async refreshAnomalies(): Promise<void> {
    const { anomalies } = await this.api.anomalies();
    renderAnomalies(this.view, anomalies);
  }
}
