/** Query state in the URL hash, so a gallery search is shareable:
 * `#q=<gallery ref>&k=10&rerank=1`.  Upload queries cannot be
 * serialized; their hash carries only k / rerank. */

export interface HashState {
  ref: string | null;
  k: number;
  rerank: boolean;
}

export const DEFAULT_K = 10;

export function writeHash(state: HashState): string {
  const params = new URLSearchParams();
  if (state.ref !== null) params.set("q", state.ref);
  params.set("k", String(state.k));
  if (state.rerank) params.set("rerank", "1");
  return "#" + params.toString();
}

export function parseHash(hash: string): HashState {
  const params = new URLSearchParams(hash.replace(/^#/, ""));
  const rawK = Number(params.get("k"));
  const k =
    Number.isInteger(rawK) && rawK >= 1 ? rawK : DEFAULT_K;
  return {
    ref: params.get("q"),
    k,
    rerank: params.get("rerank") === "1",
  };
}
