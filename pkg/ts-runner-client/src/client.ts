/**
 * Runner-side client: daInit / daExpose over raw TCP sockets.
 *
 * One socket per server shard; every connection opens with
 * RUNNER_HELLO / HELLO_ACK. daExpose pushes the local state ranges to all
 * shards, then blocks until a full analysis state (one ASSIGN per shard)
 * or a STOP arrives. The model never learns which member it propagates.
 */

import { createConnection, type Socket } from "node:net";

import {
  Assign,
  FrameDecoder,
  HelloAck,
  Message,
  NO_MEMBER,
  ProtocolError,
  encode,
} from "./protocol.js";
import { Range, blockDecompose, intersect, rangeLength } from "./partition.js";

export class ConnectionLost extends Error {}

export class ConfigError extends Error {}

type InboxItem =
  | { kind: "msg"; shard: number; message: Message }
  | { kind: "lost"; shard: number };

/** Unbounded async queue: sockets push, daExpose awaits. */
class Inbox {
  private items: InboxItem[] = [];
  private waiters: Array<(item: InboxItem) => void> = [];

  push(item: InboxItem): void {
    const waiter = this.waiters.shift();
    if (waiter) waiter(item);
    else this.items.push(item);
  }

  next(): Promise<InboxItem> {
    const item = this.items.shift();
    if (item) return Promise.resolve(item);
    return new Promise((resolve) => this.waiters.push(resolve));
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

function connectOnce(host: string, port: number): Promise<Socket> {
  return new Promise((resolve, reject) => {
    const sock = createConnection({ host, port, noDelay: true });
    sock.once("connect", () => {
      sock.removeAllListeners("error");
      resolve(sock);
    });
    sock.once("error", (err) => reject(err));
  });
}

async function connectWithBackoff(
  host: string,
  port: number,
  timeoutS: number,
): Promise<Socket> {
  const deadline = Date.now() + timeoutS * 1000;
  let delay = 50;
  for (;;) {
    try {
      return await connectOnce(host, port);
    } catch (err) {
      if (Date.now() + delay > deadline) {
        throw new ConnectionLost(`cannot reach server at ${host}:${port}: ${err}`);
      }
      await sleep(delay);
      delay = Math.min(delay * 2, 1000);
    }
  }
}

class ShardLink {
  private decoder = new FrameDecoder();

  constructor(
    readonly shard: number,
    readonly sock: Socket,
    private inbox: Inbox,
  ) {}

  /** Synchronous single-message read used during the handshake. */
  handshake(): Promise<Message> {
    return new Promise((resolve, reject) => {
      const onData = (data: Buffer) => {
        let msgs: Message[];
        try {
          msgs = this.decoder.feed(data);
        } catch (err) {
          cleanup();
          reject(err);
          return;
        }
        if (msgs.length > 0) {
          cleanup();
          if (msgs.length > 1) reject(new ProtocolError("unexpected extra handshake data"));
          else resolve(msgs[0]);
        }
      };
      const onClose = () => {
        cleanup();
        reject(new ConnectionLost(`shard ${this.shard} closed during handshake`));
      };
      const cleanup = () => {
        this.sock.off("data", onData);
        this.sock.off("close", onClose);
        this.sock.off("error", onClose);
      };
      this.sock.on("data", onData);
      this.sock.once("close", onClose);
      this.sock.once("error", onClose);
    });
  }

  startReader(): void {
    this.sock.on("data", (data: Buffer) => {
      let msgs: Message[];
      try {
        msgs = this.decoder.feed(data);
      } catch (err) {
        this.inbox.push({ kind: "lost", shard: this.shard });
        this.sock.destroy();
        return;
      }
      for (const message of msgs) this.inbox.push({ kind: "msg", shard: this.shard, message });
    });
    this.sock.once("close", () => this.inbox.push({ kind: "lost", shard: this.shard }));
    this.sock.once("error", () => this.inbox.push({ kind: "lost", shard: this.shard }));
  }

  send(message: Message): void {
    if (this.sock.destroyed) throw new ConnectionLost(`shard ${this.shard} socket closed`);
    this.sock.write(encode(message));
  }

  close(): void {
    this.sock.removeAllListeners("close");
    this.sock.removeAllListeners("error");
    this.sock.destroy();
  }
}

export interface ExposeResult {
  memberId: number;
  cycle: number;
  nsteps: number;
}

export class RunnerPart {
  memberId = NO_MEMBER;
  cycle = NO_MEMBER;
  nDynamic = 0;
  nAssimilated = 0;
  partRange: Range = { start: 0, stop: 0 };
  transfers: Array<{ shard: number; range: Range }> = [];
  links = new Map<number, ShardLink>();
  inbox = new Inbox();
  private heartbeatTimer: NodeJS.Timeout | null = null;

  constructor(
    readonly runnerId: number,
    readonly partIndex: number,
    readonly parts: number,
  ) {}

  startHeartbeats(periodS: number): void {
    const registry = this.links.get(0);
    if (!registry) return;
    this.heartbeatTimer = setInterval(() => {
      try {
        registry.send({ kind: "heartbeat", senderId: this.runnerId, timestampMs: Date.now() });
      } catch {
        /* reader notices the loss */
      }
    }, periodS * 1000);
    this.heartbeatTimer.unref();
  }

  close(): void {
    if (this.heartbeatTimer) clearInterval(this.heartbeatTimer);
    for (const link of this.links.values()) link.close();
  }
}

export interface InitOptions {
  host: string;
  basePort: number;
  nDynamicLocal: number;
  runnerId: number;
  partIndex?: number;
  parts?: number;
  connectTimeoutS?: number;
}

/** Register with the server and open one link per shard with shared data. */
export async function daInit(options: InitOptions): Promise<RunnerPart> {
  const partIndex = options.partIndex ?? 0;
  const parts = options.parts ?? 1;
  const timeoutS = options.connectTimeoutS ?? 10;
  const part = new RunnerPart(options.runnerId, partIndex, parts);
  const hello: Message = {
    kind: "runnerHello",
    runnerId: options.runnerId,
    partIndex,
    parts,
    nDynamicLocal: options.nDynamicLocal,
  };

  const sock = await connectWithBackoff(options.host, options.basePort, timeoutS);
  const registry = new ShardLink(0, sock, part.inbox);
  registry.send(hello);
  let ack: Message;
  try {
    ack = await registry.handshake();
  } catch (err) {
    if (err instanceof ConnectionLost) {
      throw new ConfigError(`server rejected registration: ${err.message}`);
    }
    throw err;
  }
  if (ack.kind !== "helloAck") throw new ProtocolError(`expected HELLO_ACK, got ${ack.kind}`);

  part.nDynamic = ack.nDynamic;
  part.nAssimilated = ack.nAssimilated;
  const partRanges = blockDecompose(ack.nDynamic, parts);
  part.partRange = partRanges[partIndex];
  if (rangeLength(part.partRange) !== options.nDynamicLocal) {
    throw new ConfigError(
      `local state length ${options.nDynamicLocal} does not match server layout ` +
        `(part ${partIndex}/${parts} of ${ack.nDynamic} is ${rangeLength(part.partRange)})`,
    );
  }
  const shardRanges = blockDecompose(ack.nDynamic, ack.shards);
  part.transfers = shardRanges
    .map((r, shard) => ({ shard, range: intersect(part.partRange, r) }))
    .filter((t) => rangeLength(t.range) > 0);

  part.links.set(0, registry);
  for (const { shard } of part.transfers) {
    if (shard === 0) continue;
    const ep = ack.endpoints[shard];
    const s = await connectWithBackoff(ep.host, ep.port, timeoutS);
    const link = new ShardLink(shard, s, part.inbox);
    link.send(hello);
    const ack2 = await link.handshake();
    if (ack2.kind !== "helloAck") throw new ProtocolError(`expected HELLO_ACK on shard ${shard}`);
    part.links.set(shard, link);
  }
  for (const link of part.links.values()) link.startReader();
  return part;
}

/**
 * Push the local state, block, overwrite it with the next analysis state.
 * Returns the propagation order, or null on STOP. The first call per part
 * sends the model's throwaway initial state as the ready signal.
 */
export async function daExpose(
  part: RunnerPart,
  localValues: Float64Array,
): Promise<ExposeResult | null> {
  if (localValues.length !== rangeLength(part.partRange)) {
    throw new ConfigError(
      `buffer length ${localValues.length} != local state length ${rangeLength(part.partRange)}`,
    );
  }
  const base = part.partRange.start;
  for (const { shard, range } of part.transfers) {
    const link = part.links.get(shard)!;
    link.send({
      kind: "statePush",
      memberId: part.memberId,
      cycle: part.cycle,
      partIndex: part.partIndex,
      rangeOffset: range.start,
      payload: localValues.subarray(range.start - base, range.stop - base),
    });
  }

  const pending = new Set(part.transfers.map((t) => t.shard));
  const ranges = new Map(part.transfers.map((t) => [t.shard, t.range]));
  let order: ExposeResult | null = null;
  while (pending.size > 0) {
    const item = await part.inbox.next();
    if (item.kind === "lost") {
      throw new ConnectionLost(`server connection lost (shard ${item.shard})`);
    }
    const msg = item.message;
    if (msg.kind === "stop") return null;
    if (msg.kind !== "assign") {
      throw new ProtocolError(`unexpected ${msg.kind} while waiting for an analysis state`);
    }
    const assign = msg as Assign;
    if (!pending.has(item.shard)) {
      throw new ProtocolError(`duplicate analysis range from shard ${item.shard}`);
    }
    if (order === null) {
      order = { memberId: assign.memberId, cycle: assign.cycle, nsteps: assign.nsteps };
    } else if (
      order.memberId !== assign.memberId ||
      order.cycle !== assign.cycle ||
      order.nsteps !== assign.nsteps
    ) {
      throw new ProtocolError("inconsistent assignment across shards");
    }
    const range = ranges.get(item.shard)!;
    if (assign.rangeOffset !== range.start || assign.payload.length !== rangeLength(range)) {
      throw new ProtocolError(`unexpected analysis range from shard ${item.shard}`);
    }
    localValues.set(assign.payload, range.start - base);
    pending.delete(item.shard);
  }
  part.memberId = order!.memberId;
  part.cycle = order!.cycle;
  return order;
}
