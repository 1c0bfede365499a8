/** Collapsible tree inspector: lazy child rendering, tombstones, countdowns. */

import { expiresIn, formatCountdown, formatSpan, TreeModel, TreeRecord } from "./tree-model.js";

const TOMBSTONE = "⧖"; // hourglass-like glyph for forgotten ranges

export class TreeView {
  private model: TreeModel | null = null;

  constructor(
    private readonly container: HTMLElement,
    private readonly nowSeconds: () => number = () => Math.floor(Date.now() / 1000),
  ) {}

  show(model: TreeModel): void {
    this.model = model;
    this.container.textContent = "";
    const header = document.createElement("div");
    header.className = "tree-header";
    header.textContent = `snapshot v${model.version} · ${model.nodeCount()} nodes · ${model.placeholderCount()} forgotten ranges`;
    this.container.appendChild(header);
    const list = document.createElement("ul");
    list.className = "tree-root";
    for (const record of model.roots()) {
      list.appendChild(this.renderEntry(record));
    }
    this.container.appendChild(list);
  }

  get shownNodeCount(): number {
    return this.model?.nodeCount() ?? 0;
  }

  private renderEntry(record: TreeRecord): HTMLLIElement {
    const item = document.createElement("li");
    if (record.placeholder) {
      item.className = "tombstone";
      item.textContent = `${TOMBSTONE} forgotten: ${formatSpan(record.span)}`;
      return item;
    }
    const row = document.createElement("div");
    row.className = "node-row";
    const children = this.model?.childrenOf(record.id) ?? [];
    const toggle = document.createElement("span");
    toggle.className = "toggle";
    toggle.textContent = children.length > 0 ? "▸" : "·";
    row.appendChild(toggle);

    const label = document.createElement("span");
    label.textContent = ` [${record.id}] L${record.level} ${formatSpan(record.span)}: ${record.summary.split("\n")[0]}`;
    row.appendChild(label);

    const badge = document.createElement("span");
    const remaining = expiresIn(record, this.nowSeconds());
    badge.className = remaining !== null && remaining <= 0 ? "countdown expired" : "countdown";
    badge.textContent = ` ${formatCountdown(remaining)}`;
    row.appendChild(badge);
    item.appendChild(row);

    if (children.length > 0) {
      let expanded = false;
      let childList: HTMLUListElement | null = null;
      row.addEventListener("click", () => {
        expanded = !expanded;
        toggle.textContent = expanded ? "▾" : "▸";
        if (expanded && childList === null) {
          // children materialize on first expansion only
          childList = document.createElement("ul");
          for (const child of children) {
            childList.appendChild(this.renderEntry(child));
          }
          item.appendChild(childList);
        } else if (childList !== null) {
          childList.style.display = expanded ? "" : "none";
        }
      });
    }
    return item;
  }
}
