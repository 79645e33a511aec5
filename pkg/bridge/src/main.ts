/**
 * CLI: serve a Gaussian reference score model over TCP or stdio.
 *
 *   node dist/main.js --mode tcp --host 127.0.0.1 --port 0 --mean 0 --variance 1
 *   node dist/main.js --mode stdio --variance 0.25 --data-rms 0.05
 *
 * In TCP mode the bound port is announced on stdout as "LISTENING <port>".
 */

import net from "node:net";
import process from "node:process";

import { GaussianScoreModel } from "./model.js";
import { serveStdio, startTcpServer } from "./server.js";

interface CliOptions {
  mode: "tcp" | "stdio";
  host: string;
  port: number;
  mean: number;
  variance: number;
  dataRms: number | null;
  sampleRate: number;
  maxLen: number;
  supportsVjp: boolean;
}

function parseArgs(argv: string[]): CliOptions {
  const opts: CliOptions = {
    mode: "tcp",
    host: "127.0.0.1",
    port: 0,
    mean: 0.0,
    variance: 1.0,
    dataRms: 0.05,
    sampleRate: 16000,
    maxLen: 1_000_000,
    supportsVjp: true,
  };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    const next = () => {
      const value = argv[++i];
      if (value === undefined) {
        throw new Error(`missing value for ${arg}`);
      }
      return value;
    };
    switch (arg) {
      case "--mode": {
        const value = next();
        if (value !== "tcp" && value !== "stdio") {
          throw new Error(`bad --mode ${value}`);
        }
        opts.mode = value;
        break;
      }
      case "--host":
        opts.host = next();
        break;
      case "--port":
        opts.port = Number(next());
        break;
      case "--mean":
        opts.mean = Number(next());
        break;
      case "--variance":
        opts.variance = Number(next());
        break;
      case "--data-rms": {
        const value = next();
        opts.dataRms = value === "none" ? null : Number(value);
        break;
      }
      case "--sample-rate":
        opts.sampleRate = Number(next());
        break;
      case "--max-len":
        opts.maxLen = Number(next());
        break;
      case "--no-vjp":
        opts.supportsVjp = false;
        break;
      default:
        throw new Error(`unknown argument ${arg}`);
    }
  }
  return opts;
}

async function main(): Promise<void> {
  const opts = parseArgs(process.argv.slice(2));
  const model = new GaussianScoreModel({
    mean: opts.mean,
    variance: opts.variance,
    dataRms: opts.dataRms,
    sampleRate: opts.sampleRate,
    maxLen: opts.maxLen,
    supportsVjp: opts.supportsVjp,
  });
  if (opts.mode === "stdio") {
    await serveStdio(model, process.stdin, process.stdout);
    return;
  }
  const server = await startTcpServer(model, opts.host, opts.port);
  const address = server.address() as net.AddressInfo;
  process.stdout.write(`LISTENING ${address.port}\n`);
}

main().catch((err) => {
  process.stderr.write(`error: ${err}\n`);
  process.exit(1);
});
