/**
 * PKVM model file writer.
 *
 * Layout: "PKVM" magic, u16 version, u32 header length, JSON header
 * (config, fingerprint, tensor directory), contiguous little-endian f32
 * payload, u32 CRC32 of the payload alone. The fingerprint is an 8-byte
 * blake2b over the canonical config JSON plus each tensor's name and
 * bytes in directory order, so the engine can verify the weights it
 * parsed are the weights that were written.
 */

import { crc32 } from "node:zlib";
import blake from "blakejs";
import { EngineConfig, canonicalConfigJson } from "./config.js";
import type { EngineTensor } from "./mapping.js";

export const MAGIC = "PKVM";
export const VERSION = 1;

function tensorBytes(t: EngineTensor): Buffer {
  // Float32Array is platform-endian; every supported node target is LE
  return Buffer.from(t.data.buffer, t.data.byteOffset, t.data.length * 4);
}

export function fingerprint(cfg: EngineConfig, tensors: EngineTensor[]): string {
  const ctx = blake.blake2bInit(8);
  blake.blake2bUpdate(ctx, Buffer.from(canonicalConfigJson(cfg), "utf-8"));
  for (const t of tensors) {
    blake.blake2bUpdate(ctx, Buffer.from(t.name, "utf-8"));
    blake.blake2bUpdate(ctx, tensorBytes(t));
  }
  return Buffer.from(blake.blake2bFinal(ctx)).toString("hex");
}

export function buildModelFile(cfg: EngineConfig, tensors: EngineTensor[]): Buffer {
  const directory = [];
  const chunks: Buffer[] = [];
  let offset = 0;
  for (const t of tensors) {
    const bytes = tensorBytes(t);
    directory.push({ name: t.name, shape: t.shape, offset });
    chunks.push(bytes);
    offset += bytes.length;
  }
  const payload = Buffer.concat(chunks);
  // the config is embedded in canonical form so a reader that parses the
  // header and re-renders it recovers the exact fingerprint input; plain
  // JSON.stringify would strip the ".0" off integral floats
  const header = Buffer.from(
    `{"config": ${canonicalConfigJson(cfg)}, ` +
    `"fingerprint": ${JSON.stringify(fingerprint(cfg, tensors))}, ` +
    `"tensors": ${JSON.stringify(directory)}}`, "utf-8");
  const frame = Buffer.alloc(10);
  frame.write(MAGIC, 0, "ascii");
  frame.writeUInt16LE(VERSION, 4);
  frame.writeUInt32LE(header.length, 6);
  const trailer = Buffer.alloc(4);
  trailer.writeUInt32LE(crc32(payload) >>> 0, 0);
  return Buffer.concat([frame, header, payload, trailer]);
}

/** Reads back the pieces of a PKVM buffer; used by tests and the manifest. */
export function inspectModelFile(buf: Buffer) {
  const magic = buf.subarray(0, 4).toString("ascii");
  const version = buf.readUInt16LE(4);
  const headerLen = buf.readUInt32LE(6);
  const header = JSON.parse(buf.subarray(10, 10 + headerLen).toString("utf-8"));
  const payload = buf.subarray(10 + headerLen, buf.length - 4);
  const storedCrc = buf.readUInt32LE(buf.length - 4);
  return { magic, version, header, payload, storedCrc, payloadCrc: crc32(payload) >>> 0 };
}
