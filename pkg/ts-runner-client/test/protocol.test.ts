import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  FrameDecoder,
  Message,
  NO_MEMBER,
  ProtocolError,
  decode,
  encode,
} from "../src/protocol.js";

const goldenPath = fileURLToPath(
  new URL("../../tests/golden/frames.bin", import.meta.url),
);

/** Must mirror tests/golden/make_golden.py exactly. */
function goldenMessages(): Message[] {
  return [
    { kind: "runnerHello", runnerId: 3, partIndex: 1, parts: 2, nDynamicLocal: 24 },
    {
      kind: "helloAck",
      shards: 2,
      nDynamic: 48,
      nAssimilated: 40,
      endpoints: [
        { host: "127.0.0.1", port: 5555 },
        { host: "127.0.0.1", port: 5556 },
      ],
    },
    {
      kind: "statePush",
      memberId: 7,
      cycle: 4,
      partIndex: 1,
      rangeOffset: 24,
      payload: Float64Array.from([1.0, -2.5, 3.25, 1e-300]),
    },
    {
      kind: "assign",
      memberId: 7,
      cycle: 5,
      nsteps: 10,
      rangeOffset: 24,
      payload: Float64Array.from([0.5, 0.0, -0.0, Math.PI]),
    },
    { kind: "stop" },
    { kind: "heartbeat", senderId: 9, timestampMs: 1700000000123 },
    { kind: "runnerGone", runnerId: 6 },
    { kind: "cycleDone", cycle: 11 },
    { kind: "studyDone" },
    {
      kind: "statePush",
      memberId: NO_MEMBER,
      cycle: NO_MEMBER,
      partIndex: 0,
      rangeOffset: 0,
      payload: new Float64Array(0),
    },
  ];
}

describe("golden frames shared with the reference implementation", () => {
  it("encodes to the exact golden bytes", () => {
    const blob = Buffer.concat(goldenMessages().map((m) => encode(m)));
    expect(blob.equals(readFileSync(goldenPath))).toBe(true);
  });

  it("decodes the golden file to the same messages", () => {
    const decoder = new FrameDecoder();
    const msgs = decoder.feed(readFileSync(goldenPath));
    expect(decoder.pendingBytes).toBe(0);
    expect(msgs).toEqual(goldenMessages());
  });
});

describe("framing", () => {
  it("emits the documented STOP frame", () => {
    expect(Buffer.from(encode({ kind: "stop" }))).toEqual(
      Buffer.from([0x01, 0x00, 0x00, 0x00, 0x05]),
    );
  });

  it("emits a 13-byte heartbeat body", () => {
    const frame = encode({ kind: "heartbeat", senderId: 7, timestampMs: 0 });
    expect(frame.readUInt32LE(0)).toBe(13);
    expect(frame.length).toBe(17);
  });

  it("round-trips random messages", () => {
    const msgs: Message[] = [];
    for (let i = 0; i < 500; i++) {
      msgs.push({
        kind: "statePush",
        memberId: i,
        cycle: i * 3,
        partIndex: i % 4,
        rangeOffset: i * 11,
        payload: Float64Array.from({ length: i % 7 }, (_, j) => Math.sin(i + j) * 1e3),
      });
      msgs.push({ kind: "heartbeat", senderId: i, timestampMs: i * 1e6 });
    }
    const stream = Buffer.concat(msgs.map((m) => encode(m)));
    for (const chunk of [1, 3, 17, 1024]) {
      const decoder = new FrameDecoder();
      const out: Message[] = [];
      for (let p = 0; p < stream.length; p += chunk) {
        out.push(...decoder.feed(stream.subarray(p, p + chunk)));
      }
      expect(out).toEqual(msgs);
    }
  });

  it("rejects unknown tags", () => {
    const frame = Buffer.from([0x01, 0x00, 0x00, 0x00, 0xff]);
    expect(() => decode(frame)).toThrow(ProtocolError);
  });

  it("asks for more bytes on a truncated frame", () => {
    const frame = encode({ kind: "cycleDone", cycle: 4 });
    expect(decode(frame.subarray(0, 6))).toBeNull();
  });

  it("rejects payload length mismatches", () => {
    const frame = Buffer.from(
      encode({
        kind: "statePush",
        memberId: 0,
        cycle: 0,
        partIndex: 0,
        rangeOffset: 0,
        payload: Float64Array.from([1.0]),
      }),
    );
    frame.writeUInt32LE(frame.readUInt32LE(0) - 8, 0);
    expect(() => decode(frame.subarray(0, frame.length - 8))).toThrow(ProtocolError);
  });
});
