import { mkdirSync, readFileSync } from "fs";
import { join } from "path";
import { z } from "zod";
import { AmapEntry, writeAmap, writeCemb } from "./containers.js";
import { Checkpoint, activationEvidence, objectQuery, tokenize } from "./model.js";
import { readPpm } from "./ppm.js";

/** Job manifest mirroring the export contract: images with captions (or
 * labels to build pseudo-captions from), the object tokens to localize,
 * the cross-attention layer, and the output directory. */

const jobSchema = z.object({
  layer: z.number().int().min(1),
  iterations: z.number().int().min(0).default(0),
  output_dir: z.string(),
  images: z
    .array(
      z.object({
        id: z.number().int().min(0),
        path: z.string(),
        caption: z.string().optional(),
        labels: z.array(z.string()).optional(),
        template: z.string().optional(),
        objects: z.array(z.object({ token: z.string(), category_id: z.number().int() })).min(1),
      }),
    )
    .min(1),
});

export type ExportJob = z.infer<typeof jobSchema>;

export function loadJob(path: string): ExportJob {
  const parsed = jobSchema.safeParse(JSON.parse(readFileSync(path, "utf-8")));
  if (!parsed.success) {
    throw new Error(`${path}: invalid job manifest: ${parsed.error.issues[0]?.message}`);
  }
  return parsed.data;
}

export const DEFAULT_TEMPLATE = "A photo of {} in the scene.";

/** Substitute the " and "-joined label list into a one-slot template. */
export function makePseudoCaption(labels: string[], template: string = DEFAULT_TEMPLATE): string {
  if (labels.length === 0) throw new Error("need at least one label to build a caption");
  if ((template.match(/\{\}/g) ?? []).length !== 1) {
    throw new Error(`template must contain exactly one {} slot: ${template}`);
  }
  return template.replace("{}", labels.join(" and "));
}

export function captionForImage(image: ExportJob["images"][number]): string {
  if (image.caption) return image.caption;
  if (image.labels && image.labels.length > 0) return makePseudoCaption(image.labels, image.template);
  throw new Error(`image ${image.id}: needs a caption or a label list`);
}

/** Per-image AMAP containers, one entry per requested object token. */
export function exportActivationMaps(job: ExportJob, ckpt: Checkpoint): string[] {
  mkdirSync(job.output_dir, { recursive: true });
  const written: string[] = [];
  for (const image of job.images) {
    const img = readPpm(image.path);
    const caption = captionForImage(image);
    const tokens = tokenize(caption);
    const entries: AmapEntry[] = [];
    for (const obj of image.objects) {
      const objectIndex = tokens.indexOf(obj.token.toLowerCase());
      if (objectIndex < 0) {
        throw new Error(`image ${image.id}: token "${obj.token}" not found in caption "${caption}"`);
      }
      const evidence = activationEvidence(ckpt, img, tokens, objectIndex, job.layer, job.iterations);
      entries.push({ categoryId: obj.category_id, hF: evidence.hF, wF: evidence.wF, values: evidence.values });
    }
    const path = join(job.output_dir, `${String(image.id).padStart(6, "0")}.amap`);
    writeAmap(path, entries);
    written.push(path);
  }
  return written;
}

/** One unit-normalized vector per category name, averaged over prompts. */
export function exportClassEmbeddings(
  names: string[],
  categoryIds: number[],
  promptFile: string,
  ckpt: Checkpoint,
  outPath: string,
): void {
  if (names.length === 0) throw new Error("empty category name list");
  if (new Set(names).size !== names.length) throw new Error("duplicate category names");
  if (names.length !== categoryIds.length) throw new Error("names and category ids must align");
  const templates = readFileSync(promptFile, "utf-8")
    .split("\n")
    .filter((line) => line.trim().length > 0);
  if (templates.length === 0) throw new Error(`${promptFile}: no templates`);
  const entries = names.map((name, i) => {
    const acc = new Float64Array(ckpt.d);
    for (const template of templates) {
      const caption = makePseudoCaption([name], template);
      const tokens = tokenize(caption);
      const idx = tokens.indexOf(tokenize(name)[0]);
      const q = objectQuery(ckpt, tokens, idx);
      for (let j = 0; j < ckpt.d; j++) acc[j] += q[j] / templates.length;
    }
    let norm = 0;
    for (let j = 0; j < ckpt.d; j++) norm += acc[j] * acc[j];
    norm = Math.sqrt(norm) || 1;
    for (let j = 0; j < ckpt.d; j++) acc[j] /= norm;
    return { categoryId: categoryIds[i], vector: acc };
  });
  writeCemb(outPath, entries);
}
