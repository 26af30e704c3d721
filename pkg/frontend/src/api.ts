import type {
  AlertRule,
  ErrorEnvelope,
  FeatureSchema,
  ImprovementAction,
  MetricSnapshot,
  ModelSnapshot,
  PredictionRecord,
  ProjectInfo,
  RankedScenario,
  ScenarioBody,
  SensitivityReport,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public envelope: ErrorEnvelope,
  ) {
    super(`${envelope.code}: ${envelope.message}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client; every console value originates from one of these calls. */
export class ApiClient {
  constructor(
    private base = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    const body = await res.json().catch(() => null);
    if (!res.ok) {
      const envelope: ErrorEnvelope =
        body && typeof body.code === "string"
          ? body
          : { code: "HTTP_" + res.status, message: res.statusText, details: {} };
      throw new ApiError(res.status, envelope);
    }
    return body as T;
  }

  private post<T>(path: string, payload?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: payload === undefined ? "{}" : JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string; store: string; bus: string }> {
    return this.request("/health");
  }

  projects(): Promise<{ projects: ProjectInfo[] }> {
    return this.request("/projects");
  }

  metricsSeries(params: {
    interval: string;
    from: string;
    to: string;
    scope?: string;
  }): Promise<{ series: MetricSnapshot[] }> {
    const q = new URLSearchParams({
      interval: params.interval,
      from: params.from,
      to: params.to,
    });
    if (params.scope) q.set("scope", params.scope);
    return this.request(`/metrics/series?${q}`);
  }

  alerts(): Promise<{ rules: AlertRule[] }> {
    return this.request("/alerts");
  }

  createAlert(rule: Omit<AlertRule, "rule_id">): Promise<AlertRule> {
    return this.post("/alerts", rule);
  }

  deleteAlert(ruleId: string): Promise<{ deleted: string }> {
    return this.request(`/alerts/${encodeURIComponent(ruleId)}`, {
      method: "DELETE",
    });
  }

  anomalies(limit = 50): Promise<{ anomalies: PredictionRecord[] }> {
    return this.request(`/anomalies?limit=${limit}`);
  }

  featureSchema(): Promise<FeatureSchema> {
    return this.request("/models/feature-schema");
  }

  snapshots(): Promise<{ snapshots: ModelSnapshot[] }> {
    return this.request("/models/snapshots");
  }

  whatifEvaluate(scenario: ScenarioBody): Promise<SensitivityReport> {
    return this.post("/whatif/evaluate", scenario);
  }

  whatifCompare(body: {
    scenarios: ScenarioBody[];
    metric?: string;
    direction?: string;
  }): Promise<{ ranking: RankedScenario[] }> {
    return this.post("/whatif/compare", body);
  }

  actions(status?: string): Promise<{ actions: ImprovementAction[] }> {
    const q = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.request(`/actions${q}`);
  }

  actionVerb(
    actionId: string,
    verb: "approve" | "reject" | "apply",
  ): Promise<ImprovementAction> {
    return this.post(`/actions/${encodeURIComponent(actionId)}/${verb}`);
  }
}
