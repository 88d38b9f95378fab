// Detection interchange records shared with the python evaluation side.
// The reader over there is strict: every box carries exactly these nine
// fields and yaw lives in (-pi, pi].  Anything else draws a warning or a
// hard error, so this module is the single place allowed to build records.

export interface InterchangeBox {
  cx: number;
  cy: number;
  cz: number;
  l: number;
  w: number;
  h: number;
  yaw: number;
  score: number;
  class: string;
}

export interface InterchangeFrame {
  frame_id: string;
  detector: string;
  boxes: InterchangeBox[];
}

// fold into (-pi, pi]; pi itself stays pi
export function normalizeYaw(yaw: number): number {
  const twoPi = 2 * Math.PI;
  let y = yaw % twoPi;
  if (y <= -Math.PI) y += twoPi;
  else if (y > Math.PI) y -= twoPi;
  return y === 0 ? 0 : y; // avoid -0 in serialized output
}

export function validateFrame(frame: InterchangeFrame): void {
  if (typeof frame.frame_id !== "string" || frame.frame_id.length === 0) {
    throw new Error("interchange frame needs a non-empty frame_id");
  }
  if (typeof frame.detector !== "string" || frame.detector.length === 0) {
    throw new Error("interchange frame needs a non-empty detector name");
  }
  if (!Array.isArray(frame.boxes)) {
    throw new Error("interchange frame needs a boxes array");
  }
  for (let i = 0; i < frame.boxes.length; i++) {
    const b: any = frame.boxes[i];
    const keys = Object.keys(b);
    const want = ["cx", "cy", "cz", "l", "w", "h", "yaw", "score", "class"];
    if (keys.length !== want.length || want.some((k) => !(k in b))) {
      throw new Error(`box ${i}: expected exactly keys ${want.join(",")}`);
    }
    for (const k of ["cx", "cy", "cz", "l", "w", "h", "yaw", "score"]) {
      if (typeof b[k] !== "number" || !Number.isFinite(b[k])) {
        throw new Error(`box ${i}: field ${k} must be a finite number`);
      }
    }
    if (typeof b.class !== "string") {
      throw new Error(`box ${i}: field class must be a string`);
    }
    if (b.l <= 0 || b.w <= 0 || b.h <= 0) {
      throw new Error(`box ${i}: dimensions must be positive`);
    }
    if (b.yaw <= -Math.PI || b.yaw > Math.PI) {
      throw new Error(`box ${i}: yaw outside (-pi, pi]`);
    }
    if (b.score < 0 || b.score > 1) {
      throw new Error(`box ${i}: score outside [0, 1]`);
    }
  }
}

// JSON.stringify keeps insertion order, so records built through the
// interfaces above serialize with a stable key layout.
export function serializeFrame(frame: InterchangeFrame): string {
  validateFrame(frame);
  return JSON.stringify(frame, null, 2) + "\n";
}
