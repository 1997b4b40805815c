/**
 * mvd-backend: reference denoiser backend over the MVD1 protocol.
 *
 *   mvd-backend --mode stdio --predictor oracle --target clean.pfm
 *   mvd-backend --mode tcp --port 9400 --predictor echo-zeros
 *   mvd-backend --mode stdio --predictor external-hook --hook ./model.js
 */

import net from "node:net";
import process from "node:process";

import { imageToLatent, readPfm } from "./pfm.js";
import {
  HelloInfo,
  Predictor,
  loadExternalHook,
  makeEchoZeros,
  makeOracle,
} from "./predictors.js";
import { BackendSession, PredictorFactory } from "./server.js";

interface Args {
  mode: string;
  predictor: string;
  target?: string;
  hook?: string;
  host: string;
  port: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { mode: "stdio", predictor: "echo-zeros", host: "127.0.0.1", port: 9400 };
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) throw new Error(`missing value for ${a}`);
      return argv[++i];
    };
    if (a === "--mode") args.mode = next();
    else if (a === "--predictor") args.predictor = next();
    else if (a === "--target") args.target = next();
    else if (a === "--hook") args.hook = next();
    else if (a === "--host") args.host = next();
    else if (a === "--port") args.port = Number(next());
    else throw new Error(`unknown argument ${a}`);
  }
  if (args.mode !== "stdio" && args.mode !== "tcp") {
    throw new Error(`--mode must be stdio or tcp, got ${args.mode}`);
  }
  if (!["oracle", "echo-zeros", "external-hook"].includes(args.predictor)) {
    throw new Error(`--predictor must be oracle, echo-zeros or external-hook`);
  }
  if (args.predictor === "oracle" && !args.target) {
    throw new Error("oracle predictor needs --target <pfm>");
  }
  if (args.predictor === "external-hook" && !args.hook) {
    throw new Error("external-hook predictor needs --hook <module>");
  }
  return args;
}

export function makeFactory(args: Args): PredictorFactory {
  return async (hello: HelloInfo): Promise<Predictor> => {
    if (args.predictor === "oracle") {
      const { data, dims } = imageToLatent(readPfm(args.target!));
      return makeOracle(data, dims, hello);
    }
    if (args.predictor === "external-hook") {
      return loadExternalHook(args.hook!, hello);
    }
    return makeEchoZeros();
  };
}

function serveStdio(factory: PredictorFactory): void {
  const session = new BackendSession(
    {
      write: (data) => process.stdout.write(data),
      close: () => process.exit(0),
    },
    factory,
  );
  let chain = Promise.resolve();
  process.stdin.on("data", (chunk: Buffer) => {
    chain = chain.then(() => session.feed(chunk));
  });
  process.stdin.on("end", () => {
    chain.then(() => process.exit(0));
  });
}

function serveTcp(factory: PredictorFactory, host: string, port: number): void {
  const server = net.createServer((socket) => {
    const session = new BackendSession(
      { write: (data) => socket.write(data), close: () => socket.end() },
      factory,
    );
    let chain = Promise.resolve();
    socket.on("data", (chunk: Buffer) => {
      chain = chain.then(() => session.feed(chunk));
    });
    socket.on("error", () => socket.destroy());
  });
  server.listen(port, host, () => {
    // parseable by launchers that picked port 0
    const addr = server.address() as net.AddressInfo;
    process.stderr.write(`mvd-backend listening on ${addr.address}:${addr.port}\n`);
  });
}

function main(): void {
  let args: Args;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (e) {
    process.stderr.write(`${(e as Error).message}\n`);
    process.exit(2);
  }
  const factory = makeFactory(args);
  if (args.mode === "stdio") serveStdio(factory);
  else serveTcp(factory, args.host, args.port);
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("main.js") || entry.endsWith("mvd-backend")) {
  main();
}
