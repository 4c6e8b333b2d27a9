/** Trailing-edge debouncer with latest-wins cancellation.
 *
 * schedule() keeps only the newest task; the timer restarts on every
 * call. When it fires, any request still in flight is aborted first, so
 * at most one task runs at a time and a slider storm costs one request.
 */

export type Task = (signal: AbortSignal) => Promise<void>;

export class LatestWins {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private controller: AbortController | null = null;
  private latest: Task | null = null;

  constructor(
    private readonly delayMs: number,
    private readonly onSettled?: () => void,
  ) {}

  get inFlight(): boolean {
    return this.controller !== null;
  }

  schedule(task: Task): void {
    this.latest = task;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.fire();
    }, this.delayMs);
  }

  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    this.latest = null;
    this.controller?.abort();
  }

  private async fire(): Promise<void> {
    const task = this.latest;
    this.latest = null;
    if (task === null) return;
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    try {
      await task(controller.signal);
    } finally {
      // a superseded task must not clear the newer task's controller
      if (this.controller === controller) {
        this.controller = null;
        this.onSettled?.();
      }
    }
  }
}
