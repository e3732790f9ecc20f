/** HTTP client for the registration server. All math happens server-side;
 *  this module only moves JSON. */

export const API_BASE = "";

export interface HyperparamMeta {
  name: string;
  kind: "continuous" | "discrete";
  min?: number;
  max?: number;
  values?: number[];
  default: number;
}

export interface Meta {
  hyperparameters: HyperparamMeta[];
  pair_ids: number[];
  height: number;
  width: number;
  labels: number[];
  metric: string;
  checkpoint_digest: string;
}

export interface B64Image {
  height: number;
  width: number;
  data: string; // base64 row-major 8-bit grayscale
}

export interface RegisterPayload {
  pair_id: number;
  lam: number;
  gamma: number;
  ws: number;
  warped: B64Image;
  difference: B64Image;
  warped_labels: B64Image;
  grid: number[][][];
  dice: Record<string, number>;
  dice_mean: number;
  mean_disp: number;
  negdet_frac: number;
  ms: number;
}

export interface RegisterRequest {
  pair_id: number;
  lam: number;
  gamma?: number;
  ws?: number;
}

export interface TuneResult {
  hp: Record<string, number>;
  objective: number;
  seconds: number;
  scope: string;
}

export interface TuneJob {
  id: number;
  status: "queued" | "running" | "done" | "failed";
  result: TuneResult | TuneResult[] | null;
  error: string | null;
}

/** Injectable transport so tests can run against a mock. */
export interface Transport {
  meta(): Promise<Meta>;
  register(req: RegisterRequest): Promise<RegisterPayload>;
  startTune(pairIds: number[] | null, scope: string | null): Promise<{ job_id: number }>;
  tuneStatus(jobId: number): Promise<TuneJob>;
  pair(id: number): Promise<Record<string, B64Image | string | number>>;
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    throw new Error(`HTTP ${resp.status}: ${await resp.text()}`);
  }
  return (await resp.json()) as T;
}

export class HttpTransport implements Transport {
  constructor(private base: string = API_BASE) {}

  meta(): Promise<Meta> {
    return fetch(`${this.base}/api/meta`).then((r) => asJson<Meta>(r));
  }

  register(req: RegisterRequest): Promise<RegisterPayload> {
    return fetch(`${this.base}/api/register`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }).then((r) => asJson<RegisterPayload>(r));
  }

  startTune(pairIds: number[] | null, scope: string | null): Promise<{ job_id: number }> {
    return fetch(`${this.base}/api/tune`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pair_ids: pairIds, scope }),
    }).then((r) => asJson<{ job_id: number }>(r));
  }

  tuneStatus(jobId: number): Promise<TuneJob> {
    return fetch(`${this.base}/api/tune/${jobId}`).then((r) => asJson<TuneJob>(r));
  }

  pair(id: number): Promise<Record<string, B64Image | string | number>> {
    return fetch(`${this.base}/api/pair/${id}`).then((r) => asJson(r));
  }
}

/** Decode a base64 grayscale image into bytes. */
export function decodeImage(img: B64Image): Uint8Array {
  const bin = atob(img.data);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}
