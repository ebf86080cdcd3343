/**
 * Minimal safetensors reader: u64 header length, JSON header, raw data.
 *
 * Only F32 tensors are supported; anything else in the file is reported
 * as unmappable by the caller rather than silently skipped here.
 */

export interface TensorInfo {
  name: string;
  dtype: string;
  shape: number[];
  /** byte range relative to the start of the data section */
  begin: number;
  end: number;
}

export interface SafetensorsFile {
  tensors: Map<string, TensorInfo>;
  /** the data section (everything after the header) */
  data: Buffer;
}

export function parseSafetensors(buf: Buffer): SafetensorsFile {
  if (buf.length < 8) {
    throw new Error(`safetensors: file too short (${buf.length} bytes)`);
  }
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new Error(`safetensors: header length ${headerLen} exceeds file`);
  }
  const header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf-8"));
  const data = buf.subarray(8 + headerLen);
  const tensors = new Map<string, TensorInfo>();
  for (const [name, entry] of Object.entries<any>(header)) {
    if (name === "__metadata__") continue;
    const [begin, end] = entry.data_offsets;
    const numel = (entry.shape as number[]).reduce((a, b) => a * b, 1);
    const expected = entry.dtype === "F32" ? numel * 4 : NaN;
    if (end - begin !== expected) {
      throw new Error(
        `safetensors: tensor ${name} is ${entry.dtype} ${JSON.stringify(entry.shape)} ` +
        `but spans ${end - begin} bytes`);
    }
    if (end > data.length) {
      throw new Error(`safetensors: tensor ${name} extends past end of file`);
    }
    tensors.set(name, { name, dtype: entry.dtype, shape: entry.shape, begin, end });
  }
  return { tensors, data };
}

/** Copy one tensor out as a Float32Array (little-endian source assumed). */
export function tensorF32(file: SafetensorsFile, name: string): Float32Array {
  const info = file.tensors.get(name);
  if (!info) {
    throw new Error(`safetensors: no tensor named ${name}`);
  }
  if (info.dtype !== "F32") {
    throw new Error(`safetensors: tensor ${name} is ${info.dtype}, wanted F32`);
  }
  const bytes = file.data.subarray(info.begin, info.end);
  // copy to guarantee 4-byte alignment regardless of header length
  const aligned = Buffer.alloc(bytes.length);
  bytes.copy(aligned);
  return new Float32Array(aligned.buffer, 0, bytes.length / 4);
}
