/** Application wiring: one SearchSession, one grid, URL-hash state.
 *
 * Concurrency: any number of user actions may fire searches, but only
 * the newest request's response is applied — session tokens drop stale
 * ones — so the grid always answers the latest query.
 */

import {
  ApiError,
  fetchHealth,
  imageUrlFromRef,
  refFromImageUrl,
  searchRequest,
  type Hit,
  type QuerySource,
} from "./api";
import { parseHash, writeHash, type HashState } from "./hash";
import {
  renderComparison,
  renderError,
  renderGrid,
  renderQuerySummary,
} from "./render";
import { SearchSession, type QueryDescriptor } from "./session";
import "./style.css";

export interface AppElements {
  health: HTMLSpanElement;
  file: HTMLInputElement;
  k: HTMLInputElement;
  rerank: HTMLInputElement;
  back: HTMLButtonElement;
  error: HTMLDivElement;
  summary: HTMLElement;
  grid: HTMLElement;
  comparison: HTMLElement;
}

export interface App {
  session: SearchSession;
  elements: AppElements;
  submit(source: QuerySource): Promise<void>;
  refresh(): void;
  /** Remove window-level listeners (tests create many apps). */
  destroy(): void;
}

function buildShell(root: HTMLElement): AppElements {
  root.innerHTML = `
    <header class="topbar">
      <h1>patret</h1>
      <span id="health" class="health"></span>
      <label class="upload-label">query image
        <input id="file" type="file" accept="image/*" />
      </label>
      <label>k <input id="k" type="number" min="1" value="10" /></label>
      <label><input id="rerank" type="checkbox" /> re-rank</label>
      <button id="back" type="button" disabled>&larr; back</button>
    </header>
    <div id="error" class="error-banner" hidden></div>
    <section id="summary"></section>
    <main id="grid" class="grid"></main>
    <section id="comparison" class="comparison" hidden></section>
  `;
  const get = <T extends HTMLElement>(id: string): T => {
    const node = root.querySelector<T>(`#${id}`);
    if (!node) throw new Error(`missing element #${id}`);
    return node;
  };
  return {
    health: get<HTMLSpanElement>("health"),
    file: get<HTMLInputElement>("file"),
    k: get<HTMLInputElement>("k"),
    rerank: get<HTMLInputElement>("rerank"),
    back: get<HTMLButtonElement>("back"),
    error: get<HTMLDivElement>("error"),
    summary: get<HTMLElement>("summary"),
    grid: get<HTMLElement>("grid"),
    comparison: get<HTMLElement>("comparison"),
  };
}

function uploadPreviewUrl(file: File): string {
  // jsdom has no createObjectURL; the preview is cosmetic, so degrade.
  try {
    return URL.createObjectURL(file);
  } catch {
    return "";
  }
}

function describe(source: QuerySource): QueryDescriptor {
  if (source.kind === "upload") {
    return {
      kind: "upload",
      name: source.file.name || "query.png",
      imageUrl: uploadPreviewUrl(source.file),
    };
  }
  return {
    kind: "gallery",
    ref: source.ref,
    imageUrl: imageUrlFromRef(source.ref),
  };
}

export function createApp(root: HTMLElement): App {
  const session = new SearchSession();
  const elements = buildShell(root);
  let lastWrittenHash = "";

  function hashState(): HashState {
    const query = session.current?.query;
    return {
      ref: query && query.kind === "gallery" ? query.ref : null,
      k: session.k,
      rerank: session.rerank,
    };
  }

  function syncHash(): void {
    lastWrittenHash = writeHash(hashState());
    if (window.location.hash !== lastWrittenHash) {
      window.location.hash = lastWrittenHash;
    }
  }

  function syncControls(): void {
    elements.k.value = String(session.k);
    elements.rerank.checked = session.rerank;
    elements.back.disabled = !session.canGoBack;
  }

  function refresh(): void {
    syncControls();
    const state = session.current;
    elements.summary.textContent = "";
    elements.grid.textContent = "";
    const queryPid = session.queryPatentId();
    if (state) {
      renderQuerySummary(elements.summary, state);
      renderGrid(elements.grid, state, queryPid, {
        onPivot: (hit: Hit) => {
          void submit({ kind: "gallery", ref: refFromImageUrl(hit.image_url) });
        },
        onCompare: (hit: Hit) => {
          session.select(hit);
          refresh();
        },
      });
    }
    renderComparison(elements.comparison, state, session.selectedHit, queryPid);
  }

  async function submit(source: QuerySource): Promise<void> {
    const token = session.beginSearch();
    const requested = { k: session.k, rerank: session.rerank };
    session.markPending(true);
    try {
      const response = await searchRequest(source, requested.k, requested.rerank);
      if (!session.applyResult(token, describe(source), response, requested)) {
        return;
      }
      renderError(elements.error, null);
      refresh();
      syncHash();
    } catch (err) {
      if (!session.isCurrent(token)) return; // superseded; ignore
      const message =
        err instanceof ApiError
          ? err.message
          : `search failed: ${err instanceof Error ? err.message : String(err)}`;
      renderError(elements.error, message);
    } finally {
      if (session.isCurrent(token)) session.markPending(false);
    }
  }

  function resubmitCurrent(): void {
    const state = session.current;
    if (!state) return;
    if (state.query.kind === "gallery") {
      void submit({ kind: "gallery", ref: state.query.ref });
    } else if (elements.file.files && elements.file.files[0]) {
      void submit({ kind: "upload", file: elements.file.files[0] });
    }
  }

  elements.file.addEventListener("change", () => {
    const file = elements.file.files && elements.file.files[0];
    if (file) void submit({ kind: "upload", file });
  });

  elements.k.addEventListener("change", () => {
    const value = Math.floor(Number(elements.k.value));
    if (Number.isFinite(value) && value >= 1) {
      session.k = value;
      resubmitCurrent();
    } else {
      elements.k.value = String(session.k);
    }
  });

  elements.rerank.addEventListener("change", () => {
    session.rerank = elements.rerank.checked;
    resubmitCurrent();
  });

  elements.back.addEventListener("click", () => {
    if (session.back()) {
      renderError(elements.error, null);
      refresh();
      syncHash();
    }
  });

  const onHashChange = (): void => {
    if (window.location.hash === lastWrittenHash) return;
    const state = parseHash(window.location.hash);
    session.k = state.k;
    session.rerank = state.rerank;
    syncControls();
    if (state.ref) void submit({ kind: "gallery", ref: state.ref });
  };
  window.addEventListener("hashchange", onHashChange);

  void fetchHealth()
    .then((health) => {
      elements.health.textContent = `gallery: ${health.gallery_size} images`;
    })
    .catch(() => {
      elements.health.textContent = "server unreachable";
    });

  const initial = parseHash(window.location.hash);
  session.k = initial.k;
  session.rerank = initial.rerank;
  syncControls();
  if (initial.ref) void submit({ kind: "gallery", ref: initial.ref });

  return {
    session,
    elements,
    submit,
    refresh,
    destroy: () => window.removeEventListener("hashchange", onHashChange),
  };
}

const rootElement = document.getElementById("app");
if (rootElement) createApp(rootElement);
