#!/usr/bin/env node
/**
 * embed-tool embed-nodes --dataset DIR [--encoder NAME] [--dim N] [--no-normalize]
 * embed-tool embed-rationales --dataset DIR [--encoder NAME]
 */

import { embedNodes, embedRationales, EmbedJob } from "./jobs.js";

function parseArgs(argv: string[]): { command: string; job: EmbedJob } {
  const [command, ...rest] = argv;
  if (command !== "embed-nodes" && command !== "embed-rationales") {
    throw new Error(
      `usage: embed-tool <embed-nodes|embed-rationales> --dataset DIR ` +
      `[--encoder NAME] [--dim N] [--batch-size N] [--no-normalize]`,
    );
  }
  const job: EmbedJob = { datasetDir: "" };
  for (let i = 0; i < rest.length; i++) {
    switch (rest[i]) {
      case "--dataset":
        job.datasetDir = rest[++i];
        break;
      case "--encoder":
        job.encoderName = rest[++i];
        break;
      case "--dim":
        job.dim = Number(rest[++i]);
        break;
      case "--batch-size":
        job.batchSize = Number(rest[++i]);
        break;
      case "--no-normalize":
        job.normalize = false;
        break;
      default:
        throw new Error(`unknown flag ${rest[i]}`);
    }
  }
  if (!job.datasetDir) throw new Error("--dataset is required");
  return { command, job };
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs(argv);
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }
  try {
    const result = parsed.command === "embed-nodes"
      ? embedNodes(parsed.job)
      : embedRationales(parsed.job);
    console.log(
      `wrote ${result.rows} rows of dim ${result.dim} ` +
      `(${result.encoderName}) to ${result.outputPath}`,
    );
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
