/** UI state machine: debounced slider -> register requests with
 *  latest-wins ordering, plus the auto-tune job flow. No DOM here. */

import type {
  HyperparamMeta,
  Meta,
  RegisterPayload,
  Transport,
  TuneJob,
  TuneResult,
} from "./api.js";

export const DEBOUNCE_MS = 80;
export const TUNE_POLL_MS = 500;

export interface Scheduler {
  set(fn: () => void, ms: number): number;
  clear(id: number): void;
}

export const realScheduler: Scheduler = {
  set: (fn, ms) => setTimeout(fn, ms) as unknown as number,
  clear: (id) => clearTimeout(id),
};

export interface UiState {
  pairId: number;
  sliders: Record<string, number>;
  payload: RegisterPayload | null;
  pending: boolean;
  tuneStatus: "idle" | "queued" | "running" | "done" | "failed";
  tuneResult: TuneResult | null;
  error: string | null;
  view: "warped" | "difference";
  gridOverlay: boolean;
  labelOverlay: boolean;
}

export class Controller {
  state: UiState;
  meta: Meta | null = null;
  private debounceId: number | null = null;
  private pollId: number | null = null;
  private requestSeq = 0; // id of the newest issued request
  private displayedSeq = 0;

  constructor(
    private transport: Transport,
    private onChange: (s: UiState) => void,
    private scheduler: Scheduler = realScheduler,
  ) {
    this.state = {
      pairId: 0,
      sliders: {},
      payload: null,
      pending: false,
      tuneStatus: "idle",
      tuneResult: null,
      error: null,
      view: "warped",
      gridOverlay: true,
      labelOverlay: false,
    };
  }

  private emit(): void {
    this.onChange(this.state);
  }

  async init(): Promise<void> {
    this.meta = await this.transport.meta();
    for (const hp of this.meta.hyperparameters) {
      this.state.sliders[hp.name] = hp.default;
    }
    this.emit();
    await this.requestNow();
  }

  sliderMeta(name: string): HyperparamMeta | undefined {
    return this.meta?.hyperparameters.find((h) => h.name === name);
  }

  clamp(name: string, value: number): number {
    const hp = this.sliderMeta(name);
    if (!hp) return value;
    if (hp.kind === "discrete" && hp.values && hp.values.length) {
      let best = hp.values[0];
      for (const v of hp.values) {
        if (Math.abs(v - value) < Math.abs(best - value)) best = v;
      }
      return best;
    }
    return Math.min(hp.max ?? 1, Math.max(hp.min ?? 0, value));
  }

  /** Slider input: clamp, store, and schedule a debounced request. */
  onSliderChange(name: string, value: number): void {
    this.state.sliders[name] = this.clamp(name, value);
    this.emit();
    if (this.debounceId !== null) this.scheduler.clear(this.debounceId);
    this.debounceId = this.scheduler.set(() => {
      this.debounceId = null;
      void this.requestNow();
    }, DEBOUNCE_MS);
  }

  selectPair(pairId: number): void {
    this.state.pairId = pairId;
    this.emit();
    void this.requestNow();
  }

  /** Issue a register request; stale responses are dropped. */
  async requestNow(): Promise<void> {
    const seq = ++this.requestSeq;
    const req = {
      pair_id: this.state.pairId,
      lam: this.state.sliders["lam"] ?? 0.5,
      ...(this.state.sliders["gamma"] !== undefined
        ? { gamma: this.state.sliders["gamma"] }
        : {}),
      ...(this.state.sliders["ncc_window"] !== undefined
        ? { ws: this.state.sliders["ncc_window"] }
        : {}),
    };
    this.state.pending = true;
    this.emit();
    try {
      const payload = await this.transport.register(req);
      if (seq < this.displayedSeq || seq < this.requestSeq) {
        return; // superseded by a newer request: latest wins
      }
      this.displayedSeq = seq;
      this.state.payload = payload;
      this.state.error = null;
    } catch (e) {
      if (seq === this.requestSeq) {
        this.state.error = String(e); // keep last good payload
      }
    } finally {
      if (seq === this.requestSeq) this.state.pending = false;
      this.emit();
    }
  }

  tuneBusy(): boolean {
    return this.state.tuneStatus === "queued" || this.state.tuneStatus === "running";
  }

  async onAutotuneClick(scope: string | null = null): Promise<void> {
    if (this.tuneBusy()) return;
    this.state.tuneStatus = "queued";
    this.state.error = null;
    this.emit();
    let jobId: number;
    try {
      const started = await this.transport.startTune(null, scope);
      jobId = started.job_id;
    } catch (e) {
      this.state.tuneStatus = "failed";
      this.state.error = String(e);
      this.emit();
      return;
    }
    await this.pollTune(jobId);
  }

  private async pollTune(jobId: number): Promise<void> {
    let job: TuneJob;
    try {
      job = await this.transport.tuneStatus(jobId);
    } catch (e) {
      this.state.tuneStatus = "failed";
      this.state.error = String(e);
      this.emit();
      return;
    }
    if (job.status === "done") {
      const result = Array.isArray(job.result) ? job.result[0] : job.result;
      this.state.tuneStatus = "done";
      this.state.tuneResult = result;
      if (result) {
        for (const [name, value] of Object.entries(result.hp)) {
          this.state.sliders[name] = this.clamp(name, value);
        }
      }
      this.emit();
      await this.requestNow(); // fetch registration at the tuned point
      return;
    }
    if (job.status === "failed") {
      this.state.tuneStatus = "failed";
      this.state.error = job.error ?? "tune job failed";
      this.emit();
      return;
    }
    this.state.tuneStatus = job.status;
    this.emit();
    this.pollId = this.scheduler.set(() => {
      void this.pollTune(jobId);
    }, TUNE_POLL_MS);
  }
}
