/** Typed client for the search service. Every number the UI shows
 * originates from these payloads; nothing is recomputed client-side. */

export interface Hit {
  rank: number;
  patent_id: string;
  image_url: string;
  score: number;
}

export interface SearchResponse {
  hits: Hit[];
  rerank_used: boolean;
  k: number;
}

export interface Health {
  status: string;
  gallery_size: number;
}

/** A query is either a local file upload or an existing gallery image. */
export type QuerySource =
  | { kind: "upload"; file: File }
  | { kind: "gallery"; ref: string };

export const IMAGE_ROUTE = "/api/images/";

/** Hits point at their image via image_url; the ref used to pivot on a
 * hit is that URL with the image route stripped. */
export function refFromImageUrl(imageUrl: string): string {
  if (!imageUrl.startsWith(IMAGE_ROUTE)) {
    throw new Error(`not a gallery image url: ${imageUrl}`);
  }
  return imageUrl.slice(IMAGE_ROUTE.length);
}

export function imageUrlFromRef(ref: string): string {
  return IMAGE_ROUTE + ref;
}

/** Server rejection (4xx/5xx) with the payload's message. */
export class ApiError extends Error {
  constructor(
    public status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function errorFrom(response: Response): Promise<ApiError> {
  let detail = `request failed with status ${response.status}`;
  try {
    const body = await response.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    /* non-JSON error body; keep the generic message */
  }
  return new ApiError(response.status, detail);
}

export async function fetchHealth(): Promise<Health> {
  const response = await fetch("/api/health");
  if (!response.ok) throw await errorFrom(response);
  return (await response.json()) as Health;
}

export async function searchRequest(
  source: QuerySource,
  k: number,
  rerank: boolean,
): Promise<SearchResponse> {
  let response: Response;
  if (source.kind === "upload") {
    const form = new FormData();
    form.append("file", source.file, source.file.name || "query.png");
    form.append("k", String(k));
    form.append("rerank", String(rerank));
    response = await fetch("/api/search", { method: "POST", body: form });
  } else {
    response = await fetch("/api/search", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ gallery_ref: source.ref, k, rerank }),
    });
  }
  if (!response.ok) throw await errorFrom(response);
  return (await response.json()) as SearchResponse;
}
