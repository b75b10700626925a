/**
 * Wire protocol codec, byte-identical to the server's framing.
 *
 * Frame: u32 LE body length, then body = 1-byte tag + fixed-width LE
 * fields (u32 ids/cycles, u64 offsets/lengths/timestamps) and f64 LE
 * payloads. See docs/protocol.md at the repository root for the
 * normative layout and worked hex examples.
 */

export const TAG_RUNNER_HELLO = 1;
export const TAG_HELLO_ACK = 2;
export const TAG_STATE_PUSH = 3;
export const TAG_ASSIGN = 4;
export const TAG_STOP = 5;
export const TAG_HEARTBEAT = 6;
export const TAG_RUNNER_GONE = 7;
export const TAG_CYCLE_DONE = 8;
export const TAG_STUDY_DONE = 9;

/** member_id / cycle marker for registration pushes that carry no member. */
export const NO_MEMBER = 0xffffffff;

export const MAX_BODY = 2 ** 31;

export class ProtocolError extends Error {}

export interface RunnerHello {
  kind: "runnerHello";
  runnerId: number;
  partIndex: number;
  parts: number;
  nDynamicLocal: number;
}

export interface HelloAck {
  kind: "helloAck";
  shards: number;
  nDynamic: number;
  nAssimilated: number;
  endpoints: Array<{ host: string; port: number }>;
}

export interface StatePush {
  kind: "statePush";
  memberId: number;
  cycle: number;
  partIndex: number;
  rangeOffset: number;
  payload: Float64Array;
}

export interface Assign {
  kind: "assign";
  memberId: number;
  cycle: number;
  nsteps: number;
  rangeOffset: number;
  payload: Float64Array;
}

export interface Stop {
  kind: "stop";
}

export interface Heartbeat {
  kind: "heartbeat";
  senderId: number;
  timestampMs: number;
}

export interface RunnerGone {
  kind: "runnerGone";
  runnerId: number;
}

export interface CycleDone {
  kind: "cycleDone";
  cycle: number;
}

export interface StudyDone {
  kind: "studyDone";
}

export type Message =
  | RunnerHello
  | HelloAck
  | StatePush
  | Assign
  | Stop
  | Heartbeat
  | RunnerGone
  | CycleDone
  | StudyDone;

class Writer {
  private chunks: Buffer[] = [];

  u8(v: number): this {
    const b = Buffer.allocUnsafe(1);
    b.writeUInt8(v);
    this.chunks.push(b);
    return this;
  }

  u32(v: number): this {
    const b = Buffer.allocUnsafe(4);
    b.writeUInt32LE(v >>> 0);
    this.chunks.push(b);
    return this;
  }

  u64(v: number): this {
    const b = Buffer.allocUnsafe(8);
    b.writeBigUInt64LE(BigInt(v));
    this.chunks.push(b);
    return this;
  }

  bytes(data: Buffer): this {
    this.chunks.push(data);
    return this;
  }

  floats(values: Float64Array): this {
    const b = Buffer.allocUnsafe(values.length * 8);
    for (let i = 0; i < values.length; i++) b.writeDoubleLE(values[i], i * 8);
    this.chunks.push(b);
    return this;
  }

  body(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export function encode(msg: Message): Buffer {
  const w = new Writer();
  switch (msg.kind) {
    case "runnerHello":
      w.u8(TAG_RUNNER_HELLO).u32(msg.runnerId).u32(msg.partIndex).u32(msg.parts).u64(msg.nDynamicLocal);
      break;
    case "helloAck": {
      if (msg.endpoints.length !== msg.shards) {
        throw new ProtocolError("HELLO_ACK endpoint count must equal shard count");
      }
      w.u8(TAG_HELLO_ACK).u32(msg.shards).u64(msg.nDynamic).u64(msg.nAssimilated);
      for (const ep of msg.endpoints) {
        const host = Buffer.from(ep.host, "utf-8");
        w.u32(host.length).bytes(host).u32(ep.port);
      }
      break;
    }
    case "statePush":
      w.u8(TAG_STATE_PUSH)
        .u32(msg.memberId)
        .u32(msg.cycle)
        .u32(msg.partIndex)
        .u64(msg.rangeOffset)
        .u64(msg.payload.length)
        .floats(msg.payload);
      break;
    case "assign":
      w.u8(TAG_ASSIGN)
        .u32(msg.memberId)
        .u32(msg.cycle)
        .u32(msg.nsteps)
        .u64(msg.rangeOffset)
        .u64(msg.payload.length)
        .floats(msg.payload);
      break;
    case "stop":
      w.u8(TAG_STOP);
      break;
    case "heartbeat":
      w.u8(TAG_HEARTBEAT).u32(msg.senderId).u64(msg.timestampMs);
      break;
    case "runnerGone":
      w.u8(TAG_RUNNER_GONE).u32(msg.runnerId);
      break;
    case "cycleDone":
      w.u8(TAG_CYCLE_DONE).u32(msg.cycle);
      break;
    case "studyDone":
      w.u8(TAG_STUDY_DONE);
      break;
  }
  const body = w.body();
  if (body.length > MAX_BODY) {
    throw new ProtocolError(`message body of ${body.length} bytes exceeds limit`);
  }
  const head = Buffer.allocUnsafe(4);
  head.writeUInt32LE(body.length);
  return Buffer.concat([head, body]);
}

class Reader {
  pos: number;

  constructor(private body: Buffer, start: number) {
    this.pos = start;
  }

  private need(size: number): void {
    if (this.pos + size > this.body.length) {
      throw new ProtocolError("message body shorter than its fields");
    }
  }

  u32(): number {
    this.need(4);
    const v = this.body.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }

  u64(): number {
    this.need(8);
    const v = this.body.readBigUInt64LE(this.pos);
    this.pos += 8;
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new ProtocolError("u64 field exceeds safe integer range");
    }
    return Number(v);
  }

  utf8(length: number): string {
    this.need(length);
    const s = this.body.toString("utf-8", this.pos, this.pos + length);
    this.pos += length;
    return s;
  }

  floats(count: number): Float64Array {
    this.need(count * 8);
    const out = new Float64Array(count);
    for (let i = 0; i < count; i++) out[i] = this.body.readDoubleLE(this.pos + i * 8);
    this.pos += count * 8;
    return out;
  }

  done(): void {
    if (this.pos !== this.body.length) {
      throw new ProtocolError("trailing bytes in message body");
    }
  }
}

function decodeBody(body: Buffer): Message {
  const tag = body.readUInt8(0);
  const r = new Reader(body, 1);
  switch (tag) {
    case TAG_RUNNER_HELLO: {
      const msg: RunnerHello = {
        kind: "runnerHello",
        runnerId: r.u32(),
        partIndex: r.u32(),
        parts: r.u32(),
        nDynamicLocal: r.u64(),
      };
      r.done();
      return msg;
    }
    case TAG_HELLO_ACK: {
      const shards = r.u32();
      const nDynamic = r.u64();
      const nAssimilated = r.u64();
      const endpoints = [];
      for (let i = 0; i < shards; i++) {
        const hostLen = r.u32();
        const host = r.utf8(hostLen);
        const port = r.u32();
        endpoints.push({ host, port });
      }
      r.done();
      return { kind: "helloAck", shards, nDynamic, nAssimilated, endpoints };
    }
    case TAG_STATE_PUSH:
    case TAG_ASSIGN: {
      const a = r.u32();
      const b = r.u32();
      const c = r.u32();
      const rangeOffset = r.u64();
      const rangeLen = r.u64();
      if (body.length !== 1 + 28 + 8 * rangeLen) {
        throw new ProtocolError(
          `payload length mismatch: declared ${rangeLen} values, body has ${body.length - 29} bytes`,
        );
      }
      const payload = r.floats(rangeLen);
      r.done();
      if (tag === TAG_STATE_PUSH) {
        return { kind: "statePush", memberId: a, cycle: b, partIndex: c, rangeOffset, payload };
      }
      return { kind: "assign", memberId: a, cycle: b, nsteps: c, rangeOffset, payload };
    }
    case TAG_STOP:
      r.done();
      return { kind: "stop" };
    case TAG_HEARTBEAT: {
      const msg: Heartbeat = { kind: "heartbeat", senderId: r.u32(), timestampMs: r.u64() };
      r.done();
      return msg;
    }
    case TAG_RUNNER_GONE: {
      const msg: RunnerGone = { kind: "runnerGone", runnerId: r.u32() };
      r.done();
      return msg;
    }
    case TAG_CYCLE_DONE: {
      const msg: CycleDone = { kind: "cycleDone", cycle: r.u32() };
      r.done();
      return msg;
    }
    case TAG_STUDY_DONE:
      r.done();
      return { kind: "studyDone" };
    default:
      throw new ProtocolError(`unknown message tag 0x${tag.toString(16)}`);
  }
}

/** Decode one frame at `offset`; null when the buffer is still incomplete. */
export function decode(
  data: Buffer,
  offset = 0,
): { message: Message; consumed: number } | null {
  if (data.length - offset < 4) return null;
  const length = data.readUInt32LE(offset);
  if (length > MAX_BODY) throw new ProtocolError(`declared body length ${length} exceeds limit`);
  if (length < 1) throw new ProtocolError("frame body must contain at least the tag byte");
  if (data.length - offset < 4 + length) return null;
  const body = data.subarray(offset + 4, offset + 4 + length);
  return { message: decodeBody(body), consumed: 4 + length };
}

/** Incremental decoder over arbitrary chunk boundaries. */
export class FrameDecoder {
  private buf: Buffer = Buffer.alloc(0);

  feed(data: Buffer): Message[] {
    this.buf = this.buf.length ? Buffer.concat([this.buf, data]) : data;
    const out: Message[] = [];
    let pos = 0;
    for (;;) {
      const got = decode(this.buf, pos);
      if (got === null) break;
      out.push(got.message);
      pos += got.consumed;
    }
    if (pos) this.buf = this.buf.subarray(pos);
    return out;
  }

  get pendingBytes(): number {
    return this.buf.length;
  }
}
