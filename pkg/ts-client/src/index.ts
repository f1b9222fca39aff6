export {
  Bernoulli,
  CATEGORICAL_TOL,
  Categorical,
  ChannelClosed,
  DecodeError,
  EndpointError,
  ErrorMessage,
  Exponential,
  FrameDecoder,
  Handshake,
  HandshakeResult,
  InvalidMessage,
  MalformedField,
  Normal,
  Observe,
  ObserveResult,
  PROTOCOL_VERSION,
  Poisson,
  RemoteError,
  Run,
  RunResult,
  Sample,
  SampleResult,
  Shutdown,
  Tensor,
  Truncated,
  Uniform,
  UnknownTag,
  WireError,
  decodeMessage,
  decodePayload,
  distInvariantError,
  encodeDistribution,
  encodeMessage,
  encodePayload,
  parseEndpoint,
  tensorInvariantError,
} from "./wire.js";
export type { Distribution, Endpoint, IpcEndpoint, Message, TcpEndpoint } from "./wire.js";

export {
  Channel,
  ClientContext,
  UsageError,
  formatAddress,
  serveForward,
  serveLoop,
} from "./client.js";
export type { ForwardFn, ServeOptions } from "./client.js";
