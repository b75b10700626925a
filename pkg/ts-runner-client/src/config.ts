/** Minimal parser for the flat key = value study configuration files. */

import { readFileSync } from "node:fs";

export interface StudyConfig {
  host: string;
  basePort: number;
  nDynamic: number;
  nAssimilated: number;
  forcing: number;
  dt: number;
  model: string;
  runnerParts: number;
  runnerTimeoutS: number;
  heartbeatPeriodS: number;
  connectTimeoutS: number;
}

export function parseStudyConfig(path: string): StudyConfig {
  const raw = new Map<string, string>();
  for (const line of readFileSync(path, "utf-8").split("\n")) {
    const stripped = line.split("#", 1)[0].trim();
    if (!stripped) continue;
    const eq = stripped.indexOf("=");
    if (eq < 0) throw new Error(`bad config line: ${line}`);
    raw.set(stripped.slice(0, eq).trim(), stripped.slice(eq + 1).trim());
  }
  const str = (key: string, dflt: string) => raw.get(key) ?? dflt;
  const num = (key: string, dflt: number) => {
    const v = raw.get(key);
    if (v === undefined) return dflt;
    const parsed = Number(v);
    if (!Number.isFinite(parsed)) throw new Error(`${key}: expected a number, got ${v}`);
    return parsed;
  };
  const runnerTimeoutS = num("runner_timeout_s", 10);
  const heartbeat = num("heartbeat_period_s", 0);
  return {
    host: str("host", "127.0.0.1"),
    basePort: num("base_port", 5555),
    nDynamic: num("n_dynamic", 48),
    nAssimilated: num("n_assimilated", 40),
    forcing: num("forcing", 8.0),
    dt: num("dt", 0.05),
    model: str("model", "lorenz96"),
    runnerParts: num("runner_parts", 1),
    runnerTimeoutS,
    heartbeatPeriodS: heartbeat > 0 ? heartbeat : runnerTimeoutS / 5,
    connectTimeoutS: num("connect_timeout_s", 10),
  };
}
