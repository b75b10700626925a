/**
 * Drop-in Lorenz-96 runner: connects to the assimilation server, then
 * loops expose / propagate until the stop signal.
 *
 * Usage: node dist/runner.js --config <study.cfg> --runner-id <n>
 * Exit codes: 0 normal stop, 1 configuration error, 2 connection failure,
 * 3 model numerical failure.
 */

import { parseStudyConfig } from "./config.js";
import { ConfigError, ConnectionLost, daExpose, daInit } from "./client.js";
import { allFinite, propagateDynamic } from "./lorenz96.js";
import { ProtocolError } from "./protocol.js";

const EXIT_OK = 0;
const EXIT_CONFIG = 1;
const EXIT_CONNECTION = 2;
const EXIT_MODEL_FAILURE = 3;

function parseArgs(argv: string[]): { config: string; runnerId: number } {
  let config = "";
  let runnerId = -1;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--config") config = argv[++i];
    else if (argv[i] === "--runner-id") runnerId = Number(argv[++i]);
    else throw new Error(`unknown argument: ${argv[i]}`);
  }
  if (!config || runnerId < 0) {
    throw new Error("usage: runner.js --config <file> --runner-id <n>");
  }
  return { config, runnerId };
}

async function main(): Promise<number> {
  let args;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(String(err));
    return EXIT_CONFIG;
  }
  let config;
  try {
    config = parseStudyConfig(args.config);
  } catch (err) {
    console.error(`configuration error: ${err}`);
    return EXIT_CONFIG;
  }
  if (config.model !== "lorenz96") {
    console.error(`this client only ships a lorenz96 driver, study uses ${config.model}`);
    return EXIT_CONFIG;
  }
  if (config.runnerParts !== 1) {
    console.error("this client supports single-part runners only");
    return EXIT_CONFIG;
  }

  // buffer content before the first assignment is a throwaway ready signal
  const buffer = new Float64Array(config.nDynamic);

  let part;
  try {
    part = await daInit({
      host: config.host,
      basePort: config.basePort,
      nDynamicLocal: config.nDynamic,
      runnerId: args.runnerId,
      connectTimeoutS: config.connectTimeoutS,
    });
  } catch (err) {
    if (err instanceof ConfigError || err instanceof ProtocolError) {
      console.error(`runner ${args.runnerId}: ${err.message}`);
      return EXIT_CONFIG;
    }
    console.error(`runner ${args.runnerId}: ${err}`);
    return EXIT_CONNECTION;
  }
  part.startHeartbeats(config.heartbeatPeriodS);

  const model = {
    nDynamic: config.nDynamic,
    nAssimilated: config.nAssimilated,
    forcing: config.forcing,
    dt: config.dt,
  };
  try {
    for (;;) {
      const order = await daExpose(part, buffer);
      if (order === null) return EXIT_OK;
      const next = propagateDynamic(buffer, order.nsteps, model);
      if (!allFinite(next)) {
        console.error(`runner ${args.runnerId}: model produced non-finite values`);
        return EXIT_MODEL_FAILURE;
      }
      buffer.set(next);
    }
  } catch (err) {
    console.error(`runner ${args.runnerId}: ${err}`);
    return EXIT_CONNECTION;
  } finally {
    part.close();
  }
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(err);
    process.exit(EXIT_CONNECTION);
  },
);
