export {
  InterchangeBox,
  InterchangeFrame,
  normalizeYaw,
  serializeFrame,
  validateFrame,
} from "./interchange.js";
export {
  BridgeConfig,
  ExportSummary,
  FieldMapping,
  convertFrame,
  convertRecord,
  exportDetections,
} from "./bridge.js";
