/**
 * REMB binary embedding files.
 *
 * Layout (little-endian):
 *   "REMB" | u8 version=1 | u8 float_width=4 | u16 reserved=0
 *   u32 dim | u32 n_tables
 *   per table: u16 name_len | name utf-8 | u64 row_count
 *   per table: row-major float32 block (row_count x dim)
 */

import { readFileSync, writeFileSync } from "node:fs";

export const REMB_MAGIC = "REMB";

export interface RembBlock {
  table: string;
  /** row_count x dim, row-major. */
  data: Float32Array;
  rows: number;
}

export function writeRemb(path: string, dim: number, blocks: RembBlock[]): void {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(16);
  header.write(REMB_MAGIC, 0, "ascii");
  header.writeUInt8(1, 4);
  header.writeUInt8(4, 5);
  header.writeUInt16LE(0, 6);
  header.writeUInt32LE(dim, 8);
  header.writeUInt32LE(blocks.length, 12);
  parts.push(header);
  for (const block of blocks) {
    const name = Buffer.from(block.table, "utf-8");
    const entry = Buffer.alloc(2 + name.length + 8);
    entry.writeUInt16LE(name.length, 0);
    name.copy(entry, 2);
    entry.writeBigUInt64LE(BigInt(block.rows), 2 + name.length);
    parts.push(entry);
  }
  for (const block of blocks) {
    if (block.data.length !== block.rows * dim) {
      throw new Error(`table ${block.table}: block has ${block.data.length} floats, expected ${block.rows * dim}`);
    }
    const buf = Buffer.alloc(block.data.length * 4);
    for (let i = 0; i < block.data.length; i++) buf.writeFloatLE(block.data[i], i * 4);
    parts.push(buf);
  }
  writeFileSync(path, Buffer.concat(parts));
}

export function readRemb(path: string): { dim: number; blocks: RembBlock[] } {
  const buf = readFileSync(path);
  if (buf.length < 16 || buf.toString("ascii", 0, 4) !== REMB_MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = buf.readUInt8(4);
  const floatWidth = buf.readUInt8(5);
  if (version !== 1) throw new Error(`${path}: unsupported version ${version}`);
  if (floatWidth !== 4) throw new Error(`${path}: unsupported float width ${floatWidth}`);
  const dim = buf.readUInt32LE(8);
  const nTables = buf.readUInt32LE(12);
  let pos = 16;
  const directory: { table: string; rows: number }[] = [];
  for (let i = 0; i < nTables; i++) {
    if (pos + 2 > buf.length) throw new Error(`${path}: unexpected end of file`);
    const nameLen = buf.readUInt16LE(pos);
    pos += 2;
    if (pos + nameLen + 8 > buf.length) throw new Error(`${path}: unexpected end of file`);
    const table = buf.toString("utf-8", pos, pos + nameLen);
    pos += nameLen;
    const rows = Number(buf.readBigUInt64LE(pos));
    pos += 8;
    directory.push({ table, rows });
  }
  const blocks: RembBlock[] = [];
  for (const { table, rows } of directory) {
    const count = rows * dim;
    if (pos + count * 4 > buf.length) {
      throw new Error(`${path}: unexpected end of file in table ${table}`);
    }
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = buf.readFloatLE(pos + i * 4);
    pos += count * 4;
    blocks.push({ table, rows, data });
  }
  if (pos !== buf.length) throw new Error(`${path}: trailing bytes`);
  return { dim, blocks };
}
