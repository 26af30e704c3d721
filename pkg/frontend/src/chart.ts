// Hand-rolled SVG line chart. Scaling is presentation only; the plotted
// values are carried untouched in data-value attributes.

export interface ChartPoint {
  label: string;
  value: number | null;
}

export interface ChartOptions {
  width?: number;
  height?: number;
  referenceValue?: number;
  referenceLabel?: string;
}

const SVG_NS = "http://www.w3.org/2000/svg";

function svg<K extends string>(tag: K, attrs: Record<string, string>): SVGElement {
  const node = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  return node as SVGElement;
}

export function lineChart(points: ChartPoint[], opts: ChartOptions = {}): SVGElement {
  const width = opts.width ?? 420;
  const height = opts.height ?? 140;
  const pad = { left: 46, right: 8, top: 8, bottom: 18 };

  const root = svg("svg", {
    viewBox: `0 0 ${width} ${height}`,
    class: "chart",
    role: "img",
  });

  const present = points.filter((p) => p.value !== null) as {
    label: string;
    value: number;
  }[];
  const candidates = present.map((p) => p.value);
  if (opts.referenceValue !== undefined) candidates.push(opts.referenceValue);
  if (candidates.length === 0) return root;

  let lo = Math.min(...candidates, 0);
  let hi = Math.max(...candidates);
  if (hi === lo) hi = lo + 1;

  const innerW = width - pad.left - pad.right;
  const innerH = height - pad.top - pad.bottom;
  const xAt = (i: number) =>
    pad.left + (points.length === 1 ? innerW / 2 : (i * innerW) / (points.length - 1));
  const yAt = (v: number) => pad.top + innerH - ((v - lo) / (hi - lo)) * innerH;

  const axis = svg("line", {
    x1: String(pad.left),
    y1: String(pad.top + innerH),
    x2: String(pad.left + innerW),
    y2: String(pad.top + innerH),
    class: "axis",
  });
  root.append(axis);

  for (const [v, anchor] of [
    [hi, "hanging"],
    [lo, "auto"],
  ] as [number, string][]) {
    const tick = svg("text", {
      x: String(pad.left - 4),
      y: String(yAt(v)),
      "text-anchor": "end",
      "dominant-baseline": anchor === "hanging" ? "hanging" : "auto",
      class: "tick",
    });
    tick.textContent = String(v);
    root.append(tick);
  }

  if (opts.referenceValue !== undefined) {
    const y = String(yAt(opts.referenceValue));
    const ref = svg("line", {
      x1: String(pad.left),
      y1: y,
      x2: String(pad.left + innerW),
      y2: y,
      class: "ref-line",
      "data-ref-value": String(opts.referenceValue),
    });
    root.append(ref);
    if (opts.referenceLabel) {
      const label = svg("text", {
        x: String(pad.left + innerW),
        y: y,
        dy: "-3",
        "text-anchor": "end",
        class: "ref-label",
      });
      label.textContent = opts.referenceLabel;
      root.append(label);
    }
  }

  const coords: string[] = [];
  points.forEach((p, i) => {
    if (p.value === null) return;
    coords.push(`${xAt(i)},${yAt(p.value)}`);
  });
  if (coords.length > 1) {
    root.append(svg("polyline", { points: coords.join(" "), class: "series" }));
  }

  points.forEach((p, i) => {
    if (p.value === null) return;
    const dot = svg("circle", {
      cx: String(xAt(i)),
      cy: String(yAt(p.value)),
      r: "2.5",
      class: "point",
      "data-label": p.label,
      "data-value": String(p.value),
    });
    const tip = svg("title", {});
    tip.textContent = `${p.label}: ${p.value}`;
    dot.append(tip);
    root.append(dot);
  });

  return root;
}
