/** Wires the chat pane, rules panel, metrics, and tree inspector together. */

import { ApiClient, Metrics, RulesResponse } from "./api.js";
import { ConsoleSession, PollingStore, TurnMode } from "./session.js";
import { TreeModel } from "./tree-model.js";
import { TreeView } from "./tree-view.js";

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) {
    throw new Error(`missing element #${id}`);
  }
  return found as T;
}

export function startConsole(): void {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get("api") ?? "http://127.0.0.1:8807");
  const session = new ConsoleSession(api);

  const transcript = element<HTMLDivElement>("transcript");
  const input = element<HTMLInputElement>("chat-input");
  const modeSelect = element<HTMLSelectElement>("chat-mode");
  const banner = element<HTMLDivElement>("banner");
  const rulesPanel = element<HTMLUListElement>("rules-list");
  const rulesVersion = element<HTMLSpanElement>("rules-version");
  const metricsPanel = element<HTMLDivElement>("metrics");
  const treeContainer = element<HTMLDivElement>("tree");
  const treeVersionInput = element<HTMLInputElement>("tree-version");

  const treeView = new TreeView(treeContainer);

  function renderTranscript(): void {
    transcript.textContent = "";
    for (const entry of session.transcript) {
      const bubble = document.createElement("div");
      bubble.className = `bubble ${entry.who}${entry.error ? " error" : ""}`;
      bubble.textContent = entry.text;
      if (entry.forgotten) {
        const badge = document.createElement("span");
        badge.className = "badge forgotten";
        badge.textContent = "forgotten";
        bubble.appendChild(badge);
      }
      if (entry.tokens !== undefined) {
        const badge = document.createElement("span");
        badge.className = "badge tokens";
        badge.textContent = `${entry.tokens} tok`;
        bubble.appendChild(badge);
      }
      transcript.appendChild(bubble);
    }
    transcript.scrollTop = transcript.scrollHeight;
  }

  async function refreshTree(version?: number): Promise<void> {
    try {
      const text = await api.fetchTreeText(version);
      treeView.show(TreeModel.parse(text));
    } catch {
      banner.style.display = "block";
    }
  }

  element<HTMLFormElement>("chat-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const text = input.value.trim();
    if (!text) {
      return;
    }
    input.value = "";
    void session.chatTurn(text, modeSelect.value as TurnMode).then(() => {
      banner.style.display = session.serviceDown ? "block" : "none";
      renderTranscript();
      void rulesStore.refresh();
      void refreshTree();
    });
    renderTranscript();
  });

  element<HTMLButtonElement>("tree-refresh").addEventListener("click", () => {
    const raw = treeVersionInput.value.trim();
    void refreshTree(raw ? Number(raw) : undefined);
  });

  const rulesStore = new PollingStore<RulesResponse>(() => api.fetchRules());
  rulesStore.subscribe((rules) => {
    rulesVersion.textContent = `v${rules.version}`;
    rulesPanel.textContent = "";
    for (const rule of rules.rules) {
      const item = document.createElement("li");
      item.textContent = rule;
      rulesPanel.appendChild(item);
    }
  });

  const metricsStore = new PollingStore<Metrics>(() => api.fetchMetrics());
  metricsStore.subscribe((metrics) => {
    metricsPanel.textContent =
      `received ${metrics.received} · processed ${metrics.processed} · ` +
      `pending ${metrics.pending} · delay ${metrics.current_delay_seconds}s · ` +
      `tree v${metrics.tree_version} (${metrics.node_count} nodes, ` +
      `${metrics.goal_plus_count} goal+)`;
  });

  rulesStore.start();
  metricsStore.start();
  void refreshTree();
}

startConsole();
