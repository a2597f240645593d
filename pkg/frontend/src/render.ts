/** DOM rendering. All text content comes straight from API payloads or
 * session state; scores are printed with toFixed(4) and never derived. */

import type { Hit } from "./api";
import type { GridState } from "./session";

export interface GridHandlers {
  onPivot: (hit: Hit) => void;
  onCompare: (hit: Hit) => void;
}

export function formatScore(score: number): string {
  return score.toFixed(4);
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function queryLabel(state: GridState): string {
  return state.query.kind === "upload"
    ? `upload: ${state.query.name}`
    : state.query.ref;
}

/** The current query strip: thumbnail + label + the settings the
 * server answered with. */
export function renderQuerySummary(
  container: HTMLElement,
  state: GridState,
): void {
  container.textContent = "";
  const box = el("div", "query-summary");
  if (state.query.imageUrl) {
    const img = el("img", "query-thumb");
    img.src = state.query.imageUrl;
    img.alt = "query image";
    box.appendChild(img);
  }
  box.appendChild(el("span", "query-label", queryLabel(state)));
  box.appendChild(
    el(
      "span",
      "query-settings",
      `k=${state.k} rerank=${state.rerank ? "on" : "off"}`,
    ),
  );
  container.appendChild(box);
}

/** Ranked results. Cell order always equals API hit order. */
export function renderGrid(
  container: HTMLElement,
  state: GridState,
  queryPatentId: string | null,
  handlers: GridHandlers,
): void {
  container.textContent = "";
  for (const hit of state.hits) {
    const card = el("figure", "hit");
    card.dataset.rank = String(hit.rank);
    if (queryPatentId !== null && hit.patent_id === queryPatentId) {
      card.classList.add("same-patent");
    }

    card.appendChild(el("span", "rank-badge", String(hit.rank)));

    const thumb = el("div", "thumb");
    const img = el("img");
    img.src = hit.image_url;
    img.alt = hit.patent_id;
    img.title = "click to search with this image";
    img.addEventListener("click", () => handlers.onPivot(hit));
    thumb.appendChild(img);
    card.appendChild(thumb);

    const caption = el("figcaption");
    caption.appendChild(el("span", "pid", hit.patent_id));
    caption.appendChild(el("span", "score", formatScore(hit.score)));
    card.appendChild(caption);

    const compare = el("button", "compare-btn", "compare");
    compare.type = "button";
    compare.addEventListener("click", () => handlers.onCompare(hit));
    card.appendChild(compare);

    container.appendChild(card);
  }
}

/** Side-by-side query vs selected hit, both at native resolution (the
 * imgs carry no sizing; panes scroll instead). */
export function renderComparison(
  container: HTMLElement,
  state: GridState | null,
  hit: Hit | null,
  queryPatentId: string | null,
): void {
  container.textContent = "";
  if (!state || !hit) {
    container.hidden = true;
    return;
  }
  container.hidden = false;

  const left = el("figure", "pane");
  left.appendChild(el("figcaption", "pane-label", queryLabel(state)));
  if (state.query.imageUrl) {
    const qimg = el("img", "native");
    qimg.src = state.query.imageUrl;
    qimg.alt = "query at native resolution";
    left.appendChild(qimg);
  } else {
    left.appendChild(el("p", "no-preview", "no preview for this upload"));
  }

  const samePatent =
    queryPatentId !== null && hit.patent_id === queryPatentId;
  const right = el("figure", "pane");
  const label = `rank ${hit.rank}: ${hit.patent_id} (score ${formatScore(
    hit.score,
  )})${samePatent ? " — same patent" : ""}`;
  right.appendChild(el("figcaption", "pane-label", label));
  if (samePatent) right.classList.add("same-patent");
  const himg = el("img", "native");
  himg.src = hit.image_url;
  himg.alt = hit.patent_id;
  right.appendChild(himg);

  const panes = el("div", "panes");
  panes.appendChild(left);
  panes.appendChild(right);
  container.appendChild(el("h2", undefined, "comparison"));
  container.appendChild(panes);
}

/** Inline error banner; null hides it. */
export function renderError(
  container: HTMLElement,
  message: string | null,
): void {
  container.textContent = message ?? "";
  container.hidden = message === null;
}
