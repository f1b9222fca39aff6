/**
 * Wire layer: tensors, distribution specs, protocol messages, and the
 * length-prefixed binary codec. Byte layout is the protocol's source of
 * truth; the golden-vector tests pin this implementation to frames produced
 * by the reference Python client.
 *
 * All integers are little-endian; strings are u32 length + UTF-8.
 */

export const PROTOCOL_VERSION = 1;

export const CATEGORICAL_TOL = 1e-9;
const U32_MAX = 0xffffffff;

// ---------------------------------------------------------------------------
// Errors

export class WireError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class InvalidMessage extends WireError {}
export class DecodeError extends WireError {}
export class Truncated extends DecodeError {}
export class UnknownTag extends DecodeError {}
export class MalformedField extends DecodeError {}
export class EndpointError extends WireError {}
export class ChannelClosed extends WireError {}
export class RemoteError extends WireError {}

// ---------------------------------------------------------------------------
// Tensor

function numel(dims: readonly number[]): number {
  let n = 1;
  for (const d of dims) n *= d;
  return n;
}

export class Tensor {
  readonly dims: readonly number[];
  readonly values: readonly number[];

  constructor(dims: readonly number[], values: readonly number[]) {
    this.dims = dims;
    this.values = values;
  }

  static scalar(v: number): Tensor {
    return new Tensor([], [v]);
  }

  static vector(vals: readonly number[]): Tensor {
    return new Tensor([vals.length], [...vals]);
  }

  item(): number {
    if (this.values.length !== 1) {
      throw new InvalidMessage(
        `item() needs exactly one element, tensor has ${this.values.length}`,
      );
    }
    return this.values[0]!;
  }

  equals(other: Tensor): boolean {
    return (
      this.dims.length === other.dims.length &&
      this.dims.every((d, i) => d === other.dims[i]) &&
      this.values.length === other.values.length &&
      this.values.every((v, i) => Object.is(v, other.values[i]))
    );
  }
}

// ---------------------------------------------------------------------------
// Distribution specs

export class Normal {
  readonly distName = "Normal";
  constructor(
    readonly mean: number,
    readonly stddev: number,
  ) {}
}

export class Uniform {
  readonly distName = "Uniform";
  constructor(
    readonly low: number,
    readonly high: number,
  ) {}
}

export class Bernoulli {
  readonly distName = "Bernoulli";
  constructor(readonly p: number) {}
}

export class Categorical {
  readonly distName = "Categorical";
  constructor(readonly probs: Tensor) {}
}

export class Poisson {
  readonly distName = "Poisson";
  constructor(readonly rate: number) {}
}

export class Exponential {
  readonly distName = "Exponential";
  constructor(readonly rate: number) {}
}

export type Distribution =
  | Normal
  | Uniform
  | Bernoulli
  | Categorical
  | Poisson
  | Exponential;

export function tensorInvariantError(t: Tensor): string | null {
  for (const d of t.dims) {
    if (!Number.isInteger(d) || d < 0 || d > U32_MAX) {
      return `bad tensor dim ${d}`;
    }
  }
  if (t.values.length !== numel(t.dims)) {
    return `tensor carries ${t.values.length} values for shape [${t.dims}]`;
  }
  return null;
}

export function distInvariantError(d: Distribution): string | null {
  if (d instanceof Normal) {
    if (!(Number.isFinite(d.mean) && Number.isFinite(d.stddev) && d.stddev > 0)) {
      return `Normal requires finite mean and stddev > 0`;
    }
  } else if (d instanceof Uniform) {
    if (!(Number.isFinite(d.low) && Number.isFinite(d.high) && d.low < d.high)) {
      return `Uniform requires low < high`;
    }
  } else if (d instanceof Bernoulli) {
    if (!(Number.isFinite(d.p) && d.p >= 0 && d.p <= 1)) {
      return `Bernoulli requires p in [0, 1]`;
    }
  } else if (d instanceof Categorical) {
    const err = tensorInvariantError(d.probs);
    if (err) return err;
    if (d.probs.dims.length !== 1 || d.probs.values.length === 0) {
      return `Categorical probs must be a non-empty rank-1 tensor`;
    }
    let total = 0;
    for (const p of d.probs.values) {
      if (!(Number.isFinite(p) && p >= 0)) return `Categorical prob ${p} out of range`;
      total += p;
    }
    if (Math.abs(total - 1) > CATEGORICAL_TOL) {
      return `Categorical probs sum to ${total}, not 1`;
    }
  } else if (d instanceof Poisson || d instanceof Exponential) {
    if (!(Number.isFinite(d.rate) && d.rate > 0)) {
      return `${d.distName} requires rate > 0`;
    }
  } else {
    return `not a distribution spec`;
  }
  return null;
}

// ---------------------------------------------------------------------------
// Messages

export class Handshake {
  constructor(
    readonly systemName: string,
    readonly protocolVersion: number,
  ) {}
}

export class HandshakeResult {
  constructor(
    readonly modelName: string,
    readonly protocolVersion: number,
  ) {}
}

export class Run {
  constructor(readonly traceId: bigint) {}
}

export class Sample {
  constructor(
    readonly address: string,
    readonly dist: Distribution,
    readonly control: boolean,
  ) {}
}

export class SampleResult {
  constructor(readonly value: Tensor) {}
}

export class Observe {
  constructor(
    readonly address: string,
    readonly dist: Distribution,
    readonly value: Tensor,
  ) {}
}

export class ObserveResult {}

export class RunResult {
  constructor(readonly outcome: Tensor) {}
}

export class Shutdown {}

export class ErrorMessage {
  constructor(readonly message: string) {}
}

export type Message =
  | Handshake
  | HandshakeResult
  | Run
  | Sample
  | SampleResult
  | Observe
  | ObserveResult
  | RunResult
  | Shutdown
  | ErrorMessage;

// ---------------------------------------------------------------------------
// Encoding

class ByteWriter {
  private chunks: Buffer[] = [];

  u8(v: number): this {
    this.chunks.push(Buffer.from([v]));
    return this;
  }

  u32(v: number): this {
    const b = Buffer.allocUnsafe(4);
    b.writeUInt32LE(v >>> 0, 0);
    this.chunks.push(b);
    return this;
  }

  u64(v: bigint): this {
    const b = Buffer.allocUnsafe(8);
    b.writeBigUInt64LE(v, 0);
    this.chunks.push(b);
    return this;
  }

  f64(v: number): this {
    const b = Buffer.allocUnsafe(8);
    b.writeDoubleLE(v, 0);
    this.chunks.push(b);
    return this;
  }

  string(s: string): this {
    const raw = Buffer.from(s, "utf8");
    return this.raw(this.lenPrefix(raw.length)).raw(raw);
  }

  private lenPrefix(n: number): Buffer {
    const b = Buffer.allocUnsafe(4);
    b.writeUInt32LE(n, 0);
    return b;
  }

  raw(b: Buffer): this {
    this.chunks.push(b);
    return this;
  }

  done(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

function writeTensor(w: ByteWriter, t: Tensor): void {
  const err = tensorInvariantError(t);
  if (err) throw new InvalidMessage(err);
  w.u32(t.dims.length);
  for (const d of t.dims) w.u32(d);
  for (const v of t.values) w.f64(v);
}

export function encodeDistribution(d: Distribution): Buffer {
  const err = distInvariantError(d);
  if (err) throw new InvalidMessage(err);
  const w = new ByteWriter();
  if (d instanceof Normal) w.u8(1).f64(d.mean).f64(d.stddev);
  else if (d instanceof Uniform) w.u8(2).f64(d.low).f64(d.high);
  else if (d instanceof Bernoulli) w.u8(3).f64(d.p);
  else if (d instanceof Categorical) {
    w.u8(4);
    writeTensor(w, d.probs);
  } else if (d instanceof Poisson) w.u8(5).f64(d.rate);
  else w.u8(6).f64((d as Exponential).rate);
  return w.done();
}

function requireAddress(address: string): void {
  if (address.length === 0) {
    throw new InvalidMessage("address must be a non-empty string");
  }
}

export function encodePayload(m: Message): Buffer {
  const w = new ByteWriter();
  if (m instanceof Handshake) {
    w.u8(1).string(m.systemName).u32(m.protocolVersion);
  } else if (m instanceof HandshakeResult) {
    w.u8(2).string(m.modelName).u32(m.protocolVersion);
  } else if (m instanceof Run) {
    w.u8(3).u64(m.traceId);
  } else if (m instanceof Sample) {
    requireAddress(m.address);
    w.u8(4).string(m.address).raw(encodeDistribution(m.dist)).u8(m.control ? 1 : 0);
  } else if (m instanceof SampleResult) {
    w.u8(5);
    writeTensor(w, m.value);
  } else if (m instanceof Observe) {
    requireAddress(m.address);
    w.u8(6).string(m.address).raw(encodeDistribution(m.dist));
    writeTensor(w, m.value);
  } else if (m instanceof ObserveResult) {
    w.u8(7);
  } else if (m instanceof RunResult) {
    w.u8(8);
    writeTensor(w, m.outcome);
  } else if (m instanceof Shutdown) {
    w.u8(9);
  } else if (m instanceof ErrorMessage) {
    w.u8(10).string(m.message);
  } else {
    throw new InvalidMessage(`not a protocol message: ${String(m)}`);
  }
  return w.done();
}

export function encodeMessage(m: Message): Buffer {
  const payload = encodePayload(m);
  const frame = Buffer.allocUnsafe(4 + payload.length);
  frame.writeUInt32LE(payload.length, 0);
  payload.copy(frame, 4);
  return frame;
}

// ---------------------------------------------------------------------------
// Decoding

const utf8 = new TextDecoder("utf-8", { fatal: true });

class ByteReader {
  pos = 0;

  constructor(readonly buf: Buffer) {}

  private need(n: number): void {
    if (this.pos + n > this.buf.length) {
      throw new Truncated(
        `need ${n} bytes at offset ${this.pos}, have ${this.buf.length - this.pos}`,
      );
    }
  }

  u8(): number {
    this.need(1);
    return this.buf[this.pos++]!;
  }

  u32(): number {
    this.need(4);
    const v = this.buf.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }

  u64(): bigint {
    this.need(8);
    const v = this.buf.readBigUInt64LE(this.pos);
    this.pos += 8;
    return v;
  }

  f64(): number {
    this.need(8);
    const v = this.buf.readDoubleLE(this.pos);
    this.pos += 8;
    return v;
  }

  string(): string {
    const n = this.u32();
    this.need(n);
    const raw = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    try {
      return utf8.decode(raw);
    } catch {
      throw new MalformedField("string field is not valid UTF-8");
    }
  }

  bool(): boolean {
    const v = this.u8();
    if (v > 1) throw new MalformedField(`bad bool byte ${v}`);
    return v === 1;
  }

  finished(): void {
    if (this.pos !== this.buf.length) {
      throw new MalformedField(
        `${this.buf.length - this.pos} trailing bytes after message`,
      );
    }
  }
}

function readTensor(r: ByteReader): Tensor {
  const rank = r.u32();
  const dims: number[] = [];
  for (let i = 0; i < rank; i++) dims.push(r.u32());
  const n = numel(dims);
  const values: number[] = [];
  for (let i = 0; i < n; i++) values.push(r.f64());
  return new Tensor(dims, values);
}

function readDistribution(r: ByteReader): Distribution {
  const tag = r.u8();
  let d: Distribution;
  switch (tag) {
    case 1:
      d = new Normal(r.f64(), r.f64());
      break;
    case 2:
      d = new Uniform(r.f64(), r.f64());
      break;
    case 3:
      d = new Bernoulli(r.f64());
      break;
    case 4:
      d = new Categorical(readTensor(r));
      break;
    case 5:
      d = new Poisson(r.f64());
      break;
    case 6:
      d = new Exponential(r.f64());
      break;
    default:
      throw new UnknownTag(`unknown distribution tag ${tag}`);
  }
  const err = distInvariantError(d);
  if (err) throw new MalformedField(err);
  return d;
}

function readAddress(r: ByteReader): string {
  const addr = r.string();
  if (addr.length === 0) {
    throw new MalformedField("address must be a non-empty string");
  }
  return addr;
}

export function decodePayload(buf: Buffer): Message {
  const r = new ByteReader(buf);
  const tag = r.u8();
  let m: Message;
  switch (tag) {
    case 1:
      m = new Handshake(r.string(), r.u32());
      break;
    case 2:
      m = new HandshakeResult(r.string(), r.u32());
      break;
    case 3:
      m = new Run(r.u64());
      break;
    case 4:
      m = new Sample(readAddress(r), readDistribution(r), r.bool());
      break;
    case 5:
      m = new SampleResult(readTensor(r));
      break;
    case 6:
      m = new Observe(readAddress(r), readDistribution(r), readTensor(r));
      break;
    case 7:
      m = new ObserveResult();
      break;
    case 8:
      m = new RunResult(readTensor(r));
      break;
    case 9:
      m = new Shutdown();
      break;
    case 10:
      m = new ErrorMessage(r.string());
      break;
    default:
      throw new UnknownTag(`unknown message tag ${tag}`);
  }
  r.finished();
  return m;
}

export function decodeMessage(frame: Buffer): Message {
  if (frame.length < 4) {
    throw new Truncated(`frame header needs 4 bytes, have ${frame.length}`);
  }
  const n = frame.readUInt32LE(0);
  if (frame.length - 4 < n) {
    throw new Truncated(`frame declares ${n} payload bytes, carries ${frame.length - 4}`);
  }
  if (frame.length - 4 > n) {
    throw new MalformedField(`${frame.length - 4 - n} bytes after frame end`);
  }
  return decodePayload(frame.subarray(4));
}

/** Incremental frame splitter for a byte stream. */
export class FrameDecoder {
  private pending: Buffer = Buffer.alloc(0);

  /** Absorb bytes; return the payloads of every frame completed by them. */
  feed(data: Buffer): Buffer[] {
    this.pending = this.pending.length
      ? Buffer.concat([this.pending, data])
      : data;
    const out: Buffer[] = [];
    let pos = 0;
    while (this.pending.length - pos >= 4) {
      const n = this.pending.readUInt32LE(pos);
      if (this.pending.length - pos - 4 < n) break;
      out.push(this.pending.subarray(pos + 4, pos + 4 + n));
      pos += 4 + n;
    }
    this.pending = this.pending.subarray(pos);
    return out;
  }

  get buffered(): number {
    return this.pending.length;
  }
}

// ---------------------------------------------------------------------------
// Endpoints

export interface TcpEndpoint {
  scheme: "tcp";
  host: string;
  port: number;
}

export interface IpcEndpoint {
  scheme: "ipc";
  path: string;
}

export type Endpoint = TcpEndpoint | IpcEndpoint;

export function parseEndpoint(uri: string): Endpoint {
  if (uri.startsWith("tcp://")) {
    const rest = uri.slice("tcp://".length);
    const sep = rest.lastIndexOf(":");
    if (sep <= 0) throw new EndpointError(`expected tcp://host:port, got ${uri}`);
    const host = rest.slice(0, sep);
    const portText = rest.slice(sep + 1);
    const port = /^\d+$/.test(portText) ? Number(portText) : NaN;
    if (!Number.isInteger(port) || port <= 0 || port >= 65536) {
      throw new EndpointError(`bad port in ${uri}`);
    }
    return { scheme: "tcp", host, port };
  }
  if (uri.startsWith("ipc://")) {
    const path = uri.slice("ipc://".length);
    if (!path.startsWith("/")) {
      throw new EndpointError(`ipc path must be absolute, got ${uri}`);
    }
    return { scheme: "ipc", path };
  }
  throw new EndpointError(`unsupported endpoint scheme in ${uri}`);
}
