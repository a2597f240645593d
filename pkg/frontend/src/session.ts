/** Search session state: the current query + its grid, a history stack
 * for back-navigation, and a sequence number that drops stale responses.
 *
 * Pure data + transitions, no DOM and no fetch, so every invariant is
 * unit-testable:
 *   - history grows only through applied user actions (applyResult);
 *   - back() restores an exact prior state (query, hits, k, rerank);
 *   - a response is applied only if it answers the newest request.
 */

import type { Hit, SearchResponse } from "./api";

/** What the grid needs to redisplay a query without holding the File
 * object itself: uploads keep a name + object URL, gallery queries the
 * gallery ref. */
export type QueryDescriptor =
  | { kind: "upload"; name: string; imageUrl: string }
  | { kind: "gallery"; ref: string; imageUrl: string };

/** The k / rerank controls as the user had them when a search was
 * issued (the server may clamp k; the response records what it used). */
export interface RequestedSettings {
  k: number;
  rerank: boolean;
}

export interface GridState {
  query: QueryDescriptor;
  hits: Hit[];
  requested: RequestedSettings;
  /** answered by the server: k after clamping, rerank as applied */
  k: number;
  rerank: boolean;
}

function frozen(state: GridState): GridState {
  return {
    query: { ...state.query },
    hits: state.hits.map((h) => ({ ...h })),
    requested: { ...state.requested },
    k: state.k,
    rerank: state.rerank,
  };
}

export class SearchSession {
  /** Requested k / rerank for the NEXT search (the grid records what
   * the server actually used). */
  k = 10;
  rerank = false;

  current: GridState | null = null;
  selectedHit: Hit | null = null;
  private history: GridState[] = [];
  private seq = 0;

  /** Start a search; the returned token must accompany the response. */
  beginSearch(): number {
    this.seq += 1;
    return this.seq;
  }

  /** True while no newer search has been started. */
  isCurrent(token: number): boolean {
    return token === this.seq;
  }

  private pending = false;

  get inFlight(): boolean {
    return this.pending;
  }

  markPending(on: boolean): void {
    this.pending = on;
  }

  /** Apply a successful response. Returns false (and changes nothing)
   * when a newer search has superseded this one. */
  applyResult(
    token: number,
    query: QueryDescriptor,
    response: SearchResponse,
    requested: RequestedSettings,
  ): boolean {
    if (!this.isCurrent(token)) return false;
    if (this.current) this.history.push(frozen(this.current));
    this.current = {
      query,
      hits: response.hits,
      requested: { ...requested },
      k: response.k,
      rerank: response.rerank_used,
    };
    this.selectedHit = null;
    return true;
  }

  get historyDepth(): number {
    return this.history.length;
  }

  get canGoBack(): boolean {
    return this.history.length > 0;
  }

  /** Pop the previous grid and make it current again, restoring the
   * k / rerank controls exactly as they were when it was issued. */
  back(): boolean {
    const prior = this.history.pop();
    if (!prior) return false;
    this.current = prior;
    this.k = prior.requested.k;
    this.rerank = prior.requested.rerank;
    this.selectedHit = null;
    return true;
  }

  /** Select a hit of the current grid for side-by-side comparison. */
  select(hit: Hit | null): void {
    this.selectedHit = hit;
  }

  /** The current query's patent id, when it can be read off the grid
   * itself (a gallery query normally retrieves its own row). Used only
   * to flag same-patent hits; null for uploads. */
  queryPatentId(): string | null {
    if (!this.current || this.current.query.kind !== "gallery") return null;
    const queryUrl = this.current.query.imageUrl;
    const self = this.current.hits.find((h) => h.image_url === queryUrl);
    return self ? self.patent_id : null;
  }
}
