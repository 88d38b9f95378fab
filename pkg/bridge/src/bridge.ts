import * as fs from "node:fs";
import * as path from "node:path";
import { execSync } from "node:child_process";
import {
  InterchangeBox,
  InterchangeFrame,
  normalizeYaw,
  serializeFrame,
} from "./interchange.js";

// Where the native detector keeps its fields.  Detectors disagree on
// naming and on dimension order inside the 7-number box, so both are
// declared here instead of guessed at parse time.
export interface FieldMapping {
  detections: string; // key holding the per-frame detection list
  box: string; // key holding [x, y, z, d1, d2, d3, yaw]
  score: string; // key holding the confidence value
  label: string; // key holding the class name
  dimsOrder: "lwh" | "wlh"; // meaning of d1, d2, d3
}

export interface BridgeConfig {
  frameDir: string; // original/fused point cloud frames, one file per frame
  nativeDir: string; // native detector results, <frame>.json
  outDir: string; // interchange files land here, <frame>.json
  detectorName: string; // recorded in every emitted frame
  mapping: FieldMapping;
  // Optional command run once per frame before reading the native file.
  // {frame} and {out} are substituted with the frame file and the native
  // result path.  Leave unset when results already exist on disk.
  detectorCmd?: string;
}

export interface ExportSummary {
  frames: number;
  boxes: number;
  skipped: number; // unmappable native records
}

function asFiniteNumber(v: any): number | null {
  return typeof v === "number" && Number.isFinite(v) ? v : null;
}

// One native record -> one interchange box, or null when the record is
// missing pieces.  Scores are copied through untouched; thresholds are the
// evaluator's business, not ours.
export function convertRecord(rec: any, mapping: FieldMapping): InterchangeBox | null {
  if (rec === null || typeof rec !== "object") return null;
  const raw = rec[mapping.box];
  if (!Array.isArray(raw) || raw.length !== 7) return null;
  const nums: number[] = [];
  for (const v of raw) {
    const n = asFiniteNumber(v);
    if (n === null) return null;
    nums.push(n);
  }
  const score = asFiniteNumber(rec[mapping.score]);
  if (score === null || score < 0 || score > 1) return null;
  const label = rec[mapping.label];
  if (typeof label !== "string" || label.length === 0) return null;
  const [d1, d2, d3] = [nums[3], nums[4], nums[5]];
  const l = mapping.dimsOrder === "lwh" ? d1 : d2;
  const w = mapping.dimsOrder === "lwh" ? d2 : d1;
  if (l <= 0 || w <= 0 || d3 <= 0) return null;
  return {
    cx: nums[0],
    cy: nums[1],
    cz: nums[2],
    l: l,
    w: w,
    h: d3,
    yaw: normalizeYaw(nums[6]),
    score: score,
    class: label,
  };
}

export function convertFrame(
  native: any,
  frameId: string,
  config: BridgeConfig
): InterchangeFrame {
  if (native === null || typeof native !== "object") {
    throw new Error(`${frameId}: native result is not an object`);
  }
  const list = native[config.mapping.detections];
  if (!Array.isArray(list)) {
    throw new Error(
      `${frameId}: native result has no '${config.mapping.detections}' list`
    );
  }
  const boxes: InterchangeBox[] = [];
  for (let i = 0; i < list.length; i++) {
    const box = convertRecord(list[i], config.mapping);
    if (box === null) {
      // skip just this record; the frame file still gets written
      console.warn(`${frameId}: skipping unmappable detection record ${i}`);
      continue;
    }
    boxes.push(box);
  }
  return { frame_id: frameId, detector: config.detectorName, boxes: boxes };
}

function listFrameIds(frameDir: string): string[] {
  const ids = fs
    .readdirSync(frameDir)
    .filter((f) => !f.startsWith("."))
    .map((f) => f.replace(/\.[^.]+$/, ""));
  ids.sort();
  return ids;
}

// Run the configured detector (when asked to), read its native output for
// every frame in frameDir, and write one interchange file per frame.
export function exportDetections(config: BridgeConfig): ExportSummary {
  const frameIds = listFrameIds(config.frameDir);
  if (frameIds.length === 0) {
    throw new Error(`no frame files found in ${config.frameDir}`);
  }
  fs.mkdirSync(config.outDir, { recursive: true });
  const summary: ExportSummary = { frames: 0, boxes: 0, skipped: 0 };
  for (const frameId of frameIds) {
    const nativePath = path.join(config.nativeDir, frameId + ".json");
    if (config.detectorCmd) {
      const framePath = path.join(config.frameDir, frameId + ".bin");
      const cmd = config.detectorCmd
        .replaceAll("{frame}", framePath)
        .replaceAll("{out}", nativePath);
      execSync(cmd, { stdio: ["ignore", "ignore", "inherit"] });
    }
    if (!fs.existsSync(nativePath)) {
      throw new Error(`missing native detector result ${nativePath}`);
    }
    const native = JSON.parse(fs.readFileSync(nativePath, "utf-8"));
    const frame = convertFrame(native, frameId, config);
    summary.skipped += listLength(native, config) - frame.boxes.length;
    fs.writeFileSync(
      path.join(config.outDir, frameId + ".json"),
      serializeFrame(frame)
    );
    summary.frames += 1;
    summary.boxes += frame.boxes.length;
  }
  return summary;
}

function listLength(native: any, config: BridgeConfig): number {
  const list = native[config.mapping.detections];
  return Array.isArray(list) ? list.length : 0;
}
