#!/usr/bin/env node
/** vlm-adapter CLI
 *
 *   make-checkpoint  --out model/checkpoint.json [--seed 7]
 *   export-actmaps   --job job.json --checkpoint model/checkpoint.json
 *   export-embeddings --names cat,dog --ids 1,2 --prompts templates.txt \
 *                     --checkpoint model/checkpoint.json --out classes.cemb
 */

import { mkdirSync, writeFileSync } from "fs";
import { dirname } from "path";
import { exportActivationMaps, exportClassEmbeddings, loadJob } from "./jobs.js";
import { loadCheckpoint, makeCheckpoint } from "./model.js";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed flag at "${argv[i]}"`);
    }
    flags.set(argv[i].slice(2), argv[i + 1]);
  }
  return flags;
}

function need(flags: Map<string, string>, name: string): string {
  const v = flags.get(name);
  if (v === undefined) throw new Error(`missing required flag --${name}`);
  return v;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    const flags = parseFlags(rest);
    if (command === "make-checkpoint") {
      const out = need(flags, "out");
      const seed = Number(flags.get("seed") ?? "7");
      mkdirSync(dirname(out), { recursive: true });
      writeFileSync(out, JSON.stringify(makeCheckpoint(seed), null, 1) + "\n");
      console.log(`wrote checkpoint (seed ${seed}) to ${out}`);
      return 0;
    }
    if (command === "export-actmaps") {
      const job = loadJob(need(flags, "job"));
      const ckpt = loadCheckpoint(need(flags, "checkpoint"));
      const written = exportActivationMaps(job, ckpt);
      console.log(`wrote ${written.length} activation containers to ${job.output_dir}`);
      return 0;
    }
    if (command === "export-embeddings") {
      const names = need(flags, "names").split(",");
      const ids = need(flags, "ids").split(",").map(Number);
      const ckpt = loadCheckpoint(need(flags, "checkpoint"));
      exportClassEmbeddings(names, ids, need(flags, "prompts"), ckpt, need(flags, "out"));
      console.log(`wrote ${names.length} class embeddings to ${need(flags, "out")}`);
      return 0;
    }
    console.error(`unknown command: ${command ?? "(none)"}`);
    return 2;
  } catch (e) {
    console.error(`error: ${(e as Error).message}`);
    return 2;
  }
}

const invokedDirectly = process.argv[1]?.endsWith("cli.js") || process.argv[1]?.endsWith("cli.ts");
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
