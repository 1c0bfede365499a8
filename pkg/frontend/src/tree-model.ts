/** Parsed view of an emtree/1 snapshot: records, child lookup, counts. */

export interface TreeRecord {
  id: string;
  level: number | null;
  kind: string;
  span: [number, number];
  expiration: number | null;
  summary: string;
  parentId: string | null;
  placeholder: boolean;
  shortSummary: string;
  neverExpires: boolean;
  attributes?: Record<string, string>;
}

interface RawRecord {
  id: string;
  level: number | null;
  kind: string;
  span: [number, number];
  expiration: number | null;
  summary: string;
  parent_id: string | null;
  placeholder: boolean;
  short_summary: string;
  never_expires?: boolean;
  attributes?: Record<string, string>;
}

const HEADER = "emtree/1";

export class TreeModel {
  readonly records: TreeRecord[] = [];
  private byParent = new Map<string | null, TreeRecord[]>();

  private constructor(
    readonly version: number,
    readonly maxDepth: number,
    readonly rootSummary: string,
  ) {}

  static parse(text: string): TreeModel {
    const lines = text.split("\n").filter((line) => line.trim().length > 0);
    if (lines.length === 0 || lines[0] !== HEADER) {
      throw new Error("not an emtree/1 snapshot");
    }
    const meta = JSON.parse(lines[1]) as {
      meta: boolean;
      version: number;
      max_depth: number;
      root_summary: string;
    };
    if (!meta.meta) {
      throw new Error("missing snapshot meta record");
    }
    const model = new TreeModel(meta.version, meta.max_depth, meta.root_summary ?? "");
    for (const line of lines.slice(2)) {
      const raw = JSON.parse(line) as RawRecord;
      const record: TreeRecord = {
        id: raw.id,
        level: raw.level,
        kind: raw.kind,
        span: raw.span,
        expiration: raw.expiration,
        summary: raw.summary,
        parentId: raw.parent_id ?? null,
        placeholder: Boolean(raw.placeholder),
        shortSummary: raw.short_summary ?? "",
        neverExpires: Boolean(raw.never_expires),
        attributes: raw.attributes,
      };
      model.records.push(record);
      const siblings = model.byParent.get(record.parentId) ?? [];
      siblings.push(record);
      model.byParent.set(record.parentId, siblings);
    }
    return model;
  }

  childrenOf(parentId: string | null): TreeRecord[] {
    return this.byParent.get(parentId) ?? [];
  }

  roots(): TreeRecord[] {
    return this.childrenOf(null);
  }

  /** Non-tombstone node count; must agree with the service's metrics. */
  nodeCount(): number {
    return this.records.filter((r) => !r.placeholder).length;
  }

  placeholderCount(): number {
    return this.records.filter((r) => r.placeholder).length;
  }
}

/** Seconds until expiry at `nowSeconds`; negative values mean already expired. */
export function expiresIn(record: TreeRecord, nowSeconds: number): number | null {
  if (record.placeholder || record.neverExpires || record.expiration === null) {
    return null;
  }
  return record.expiration - nowSeconds;
}

export function formatSpan(span: [number, number]): string {
  const fmt = (t: number) => {
    const d = new Date(t * 1000);
    const pad = (n: number) => String(n).padStart(2, "0");
    return (
      `${d.getUTCFullYear()}/${pad(d.getUTCMonth() + 1)}/${pad(d.getUTCDate())} ` +
      `${pad(d.getUTCHours())}:${pad(d.getUTCMinutes())}`
    );
  };
  const [start, end] = span;
  const a = fmt(start);
  const b = fmt(end);
  if (a.slice(0, 10) === b.slice(0, 10)) {
    return `${a}–${b.slice(11)}`;
  }
  return `${a} – ${b}`;
}

export function formatCountdown(seconds: number | null): string {
  if (seconds === null) {
    return "kept";
  }
  const abs = Math.abs(seconds);
  const unit =
    abs >= 86400 ? `${Math.round(abs / 86400)}d` : abs >= 3600 ? `${Math.round(abs / 3600)}h` : `${Math.round(abs / 60)}m`;
  return seconds >= 0 ? `expires in ${unit}` : `expired ${unit} ago`;
}
