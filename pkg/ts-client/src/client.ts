/**
 * Simulator-side SDK: replace built-in RNG calls with remote draws.
 *
 * A model registers an async forward function; every `ctx.sample` becomes a
 * Sample request answered by the controller, observations become Observe
 * requests, and the process entry point becomes a serve loop the controller
 * drives run by run. Call sequences produce frames byte-identical to the
 * reference client's, which the golden-vector tests enforce.
 */

import * as fs from "node:fs";
import * as net from "node:net";

import {
  ChannelClosed,
  Distribution,
  Endpoint,
  ErrorMessage,
  FrameDecoder,
  Handshake,
  HandshakeResult,
  Message,
  Observe,
  ObserveResult,
  PROTOCOL_VERSION,
  RemoteError,
  Run,
  RunResult,
  Sample,
  SampleResult,
  Shutdown,
  Tensor,
  WireError,
  decodePayload,
  encodeMessage,
  parseEndpoint,
} from "./wire.js";

export class UsageError extends WireError {}

// ---------------------------------------------------------------------------
// Channel: promise-based framed messaging over a socket

export class Channel {
  private decoder = new FrameDecoder();
  private queue: Buffer[] = [];
  private waiters: Array<{
    resolve: (b: Buffer) => void;
    reject: (e: Error) => void;
  }> = [];
  private closedWith: Error | null = null;

  constructor(readonly socket: net.Socket) {
    socket.on("data", (data) => {
      for (const payload of this.decoder.feed(data)) {
        const waiter = this.waiters.shift();
        if (waiter) waiter.resolve(payload);
        else this.queue.push(payload);
      }
    });
    const fail = (e: Error) => {
      if (this.closedWith) return;
      this.closedWith = e;
      for (const w of this.waiters.splice(0)) w.reject(e);
    };
    socket.on("error", (e) => fail(new ChannelClosed(`socket error: ${e.message}`)));
    socket.on("close", () => fail(new ChannelClosed("connection closed by peer")));
  }

  send(m: Message): void {
    this.sendRaw(encodeMessage(m));
  }

  sendRaw(frame: Buffer): void {
    if (this.closedWith) throw this.closedWith;
    this.socket.write(frame);
  }

  recvPayload(): Promise<Buffer> {
    const queued = this.queue.shift();
    if (queued) return Promise.resolve(queued);
    if (this.closedWith) return Promise.reject(this.closedWith);
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
  }

  async recv(): Promise<Message> {
    return decodePayload(await this.recvPayload());
  }

  close(): void {
    // end() flushes queued frames (a final Error reply, most importantly)
    // before the FIN; destroy() alone may discard them.
    this.socket.end(() => this.socket.destroy());
  }
}

// ---------------------------------------------------------------------------
// Addressing

const ILLEGAL_IN_FRAME = /[;\]]/;

export function formatAddress(frames: readonly string[], distName: string): string {
  if (frames.length === 0) {
    throw new UsageError("address needs at least one frame");
  }
  for (const f of frames) {
    if (f.length === 0 || ILLEGAL_IN_FRAME.test(f)) {
      throw new UsageError(`illegal frame tag ${JSON.stringify(f)}`);
    }
  }
  return `[${frames.join("; ")}]__${distName}`;
}

/** Wire-level message name, matching the reference implementation's spelling. */
function messageName(m: Message): string {
  const n = m.constructor.name;
  return n === "ErrorMessage" ? "Error" : n;
}

type Outcome = number | readonly number[] | Tensor;

function asOutcome(value: Outcome): Tensor {
  if (value instanceof Tensor) return value;
  if (typeof value === "number") return Tensor.scalar(value);
  return Tensor.vector(value);
}

export type ForwardFn = (ctx: ClientContext) => Promise<Outcome> | Outcome;

// ---------------------------------------------------------------------------
// Client context

export class ClientContext {
  readonly frameStack: string[] = [];
  readonly occurrences = new Map<string, number>();
  private inForward = false;
  private addrCache = new Map<string, string>();

  constructor(
    readonly channel: Channel,
    readonly modelName: string,
  ) {}

  pushFrame(name: string): void {
    if (name.length === 0 || ILLEGAL_IN_FRAME.test(name)) {
      throw new UsageError(`illegal frame tag ${JSON.stringify(name)}`);
    }
    this.frameStack.push(name);
  }

  popFrame(): void {
    if (this.frameStack.length === 0) {
      throw new UsageError("popFrame on an empty frame stack");
    }
    this.frameStack.pop();
  }

  async withFrame<T>(name: string, body: () => Promise<T> | T): Promise<T> {
    this.pushFrame(name);
    try {
      return await body();
    } finally {
      this.frameStack.pop();
    }
  }

  private address(tag: string, distName: string): string {
    const key = `${this.frameStack.join("\u0000")}\u0000${tag}\u0000${distName}`;
    let addr = this.addrCache.get(key);
    if (addr === undefined) {
      addr = formatAddress([...this.frameStack, tag], distName);
      this.addrCache.set(key, addr);
    }
    return addr;
  }

  private count(addr: string): void {
    this.occurrences.set(addr, (this.occurrences.get(addr) ?? 0) + 1);
  }

  /** Request one draw from the controller; resolves with the value. */
  async sample(dist: Distribution, tag: string): Promise<Tensor> {
    if (!this.inForward) {
      throw new UsageError("sample called outside a forward execution");
    }
    const addr = this.address(tag, dist.distName);
    this.count(addr);
    this.channel.send(new Sample(addr, dist, true));
    const m = await this.channel.recv();
    if (m instanceof SampleResult) return m.value;
    if (m instanceof ErrorMessage) {
      throw new RemoteError(`controller error: ${m.message}`);
    }
    throw new UsageError(`expected SampleResult, got ${messageName(m)}`);
  }

  /** Report an observed value for the controller to score. */
  async observe(dist: Distribution, value: number | Tensor, tag: string): Promise<void> {
    if (!this.inForward) {
      throw new UsageError("observe called outside a forward execution");
    }
    const addr = this.address(tag, dist.distName);
    this.count(addr);
    const t = value instanceof Tensor ? value : Tensor.scalar(value);
    this.channel.send(new Observe(addr, dist, t));
    const m = await this.channel.recv();
    if (m instanceof ObserveResult) return;
    if (m instanceof ErrorMessage) {
      throw new RemoteError(`controller error: ${m.message}`);
    }
    throw new UsageError(`expected ObserveResult, got ${messageName(m)}`);
  }

  beginRun(): void {
    this.occurrences.clear();
    this.inForward = true;
  }

  endRun(): void {
    this.inForward = false;
    if (this.frameStack.length > 0) {
      this.frameStack.length = 0;
      throw new UsageError("frame stack not empty at end of forward");
    }
  }
}

// ---------------------------------------------------------------------------
// Serving

async function serveSession(
  channel: Channel,
  modelName: string,
  forward: ForwardFn,
): Promise<void> {
  let m = await channel.recv();
  if (m instanceof Shutdown) return;
  if (!(m instanceof Handshake)) {
    channel.send(new ErrorMessage(`expected Handshake, got ${messageName(m)}`));
    return;
  }
  if (m.protocolVersion !== PROTOCOL_VERSION) {
    channel.send(
      new ErrorMessage(
        `protocol version mismatch: controller ${m.protocolVersion}, ` +
          `model ${PROTOCOL_VERSION}`,
      ),
    );
    return;
  }
  channel.send(new HandshakeResult(modelName, PROTOCOL_VERSION));
  const ctx = new ClientContext(channel, modelName);
  for (;;) {
    m = await channel.recv();
    if (m instanceof Shutdown) return;
    if (m instanceof ErrorMessage) {
      throw new RemoteError(`controller error: ${m.message}`);
    }
    if (!(m instanceof Run)) {
      channel.send(new ErrorMessage(`expected Run, got ${messageName(m)}`));
      throw new UsageError(`protocol violation: ${messageName(m)} while idle`);
    }
    ctx.beginRun();
    let outcome: Outcome;
    try {
      outcome = await forward(ctx);
      ctx.endRun();
    } catch (e) {
      if (e instanceof RemoteError) throw e;
      try {
        channel.send(new ErrorMessage(`forward execution failed: ${(e as Error).message}`));
      } catch {
        // Socket already gone; the original failure matters more.
      }
      throw e;
    }
    channel.send(new RunResult(asOutcome(outcome)));
  }
}

function listen(ep: Endpoint, server: net.Server): Promise<void> {
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    const onListening = () => {
      server.removeListener("error", reject);
      resolve();
    };
    if (ep.scheme === "tcp") server.listen(ep.port, ep.host, onListening);
    else {
      if (fs.existsSync(ep.path)) fs.unlinkSync(ep.path);
      server.listen(ep.path, onListening);
    }
  });
}

export interface ServeOptions {
  /** How many controller sessions to accept; undefined = forever. */
  sessions?: number;
  /** Fires once the listener is bound, for supervisors and tests. */
  onReady?: (server: net.Server) => void;
}

/** Serve controller sessions back to back until the budget runs out. */
export async function serveLoop(
  endpoint: string | Endpoint,
  modelName: string,
  forward: ForwardFn,
  options: ServeOptions = {},
): Promise<void> {
  const ep = typeof endpoint === "string" ? parseEndpoint(endpoint) : endpoint;
  const backlog: net.Socket[] = [];
  let notify: (() => void) | null = null;
  const server = net.createServer((socket) => {
    backlog.push(socket);
    notify?.();
  });
  await listen(ep, server);
  options.onReady?.(server);
  try {
    let served = 0;
    while (options.sessions === undefined || served < options.sessions) {
      while (backlog.length === 0) {
        await new Promise<void>((resolve) => {
          notify = resolve;
        });
        notify = null;
      }
      const socket = backlog.shift()!;
      const channel = new Channel(socket);
      try {
        await serveSession(channel, modelName, forward);
      } finally {
        channel.close();
      }
      served += 1;
    }
  } finally {
    server.close();
    for (const s of backlog) s.destroy();
  }
}

/** Listen, serve exactly one controller session, return cleanly on Shutdown. */
export function serveForward(
  endpoint: string | Endpoint,
  modelName: string,
  forward: ForwardFn,
  options: Omit<ServeOptions, "sessions"> = {},
): Promise<void> {
  return serveLoop(endpoint, modelName, forward, { ...options, sessions: 1 });
}
