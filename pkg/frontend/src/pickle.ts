/**
 * Minimal pickle virtual machine, sufficient to read the `data.pkl`
 * object graph inside PyTorch checkpoints (protocols 2-4).
 *
 * Global references resolve to lightweight marker objects; persistent
 * ids (torch storages) are delegated to a caller-supplied callback.
 */

export class PickleError extends Error {}

export interface GlobalRef {
  kind: "global";
  module: string;
  name: string;
}

export interface ReduceCall {
  kind: "reduce";
  func: GlobalRef;
  args: unknown[];
}

export type PersistentLoad = (pid: unknown) => unknown;

const MARK = Symbol("mark");

export function unpickle(blob: Buffer, persistentLoad: PersistentLoad): unknown {
  const stack: unknown[] = [];
  const memo = new Map<number, unknown>();
  let pos = 0;

  const u8 = () => blob.readUInt8(pos++);
  const u16 = () => {
    const v = blob.readUInt16LE(pos);
    pos += 2;
    return v;
  };
  const u32 = () => {
    const v = blob.readUInt32LE(pos);
    pos += 4;
    return v;
  };
  const i32 = () => {
    const v = blob.readInt32LE(pos);
    pos += 4;
    return v;
  };
  const readLine = () => {
    const end = blob.indexOf(0x0a, pos);
    if (end < 0) throw new PickleError("unterminated line");
    const s = blob.subarray(pos, end).toString("utf-8");
    pos = end + 1;
    return s;
  };
  const popMark = (): unknown[] => {
    const idx = stack.lastIndexOf(MARK);
    if (idx < 0) throw new PickleError("mark not found");
    const items = stack.splice(idx + 1);
    stack.pop(); // the mark itself
    return items;
  };
  const reduce = (func: unknown, args: unknown[]): unknown => {
    const g = func as GlobalRef;
    if (g.kind !== "global") throw new PickleError("REDUCE on non-global");
    if (g.module === "collections" && g.name === "OrderedDict") {
      return new Map<unknown, unknown>();
    }
    return { kind: "reduce", func: g, args } as ReduceCall;
  };
  const setItems = (target: unknown, pairs: unknown[]) => {
    if (target instanceof Map) {
      for (let i = 0; i < pairs.length; i += 2) target.set(pairs[i], pairs[i + 1]);
    } else if (target && typeof target === "object") {
      const obj = target as Record<string, unknown>;
      for (let i = 0; i < pairs.length; i += 2) obj[String(pairs[i])] = pairs[i + 1];
    } else {
      throw new PickleError("SETITEMS on non-container");
    }
  };

  for (;;) {
    const op = u8();
    switch (op) {
      case 0x80: // PROTO
        u8();
        break;
      case 0x2e: // STOP
        return stack.pop();
      case 0x28: // MARK
        stack.push(MARK);
        break;
      case 0x4e: // NONE
        stack.push(null);
        break;
      case 0x88: // NEWTRUE
        stack.push(true);
        break;
      case 0x89: // NEWFALSE
        stack.push(false);
        break;
      case 0x4b: // BININT1
        stack.push(u8());
        break;
      case 0x4d: // BININT2
        stack.push(u16());
        break;
      case 0x4a: // BININT
        stack.push(i32());
        break;
      case 0x8a: {
        // LONG1
        const n = u8();
        let v = 0n;
        for (let i = 0; i < n; i++) v |= BigInt(u8()) << BigInt(8 * i);
        if (n > 0 && blob.readUInt8(pos - 1) & 0x80) v -= 1n << BigInt(8 * n);
        stack.push(Number(v));
        break;
      }
      case 0x47: {
        // BINFLOAT (big-endian double)
        const v = blob.readDoubleBE(pos);
        pos += 8;
        stack.push(v);
        break;
      }
      case 0x58: {
        // BINUNICODE
        const n = u32();
        stack.push(blob.subarray(pos, pos + n).toString("utf-8"));
        pos += n;
        break;
      }
      case 0x8c: {
        // SHORT_BINUNICODE
        const n = u8();
        stack.push(blob.subarray(pos, pos + n).toString("utf-8"));
        pos += n;
        break;
      }
      case 0x55: {
        // SHORT_BINSTRING
        const n = u8();
        stack.push(blob.subarray(pos, pos + n).toString("latin1"));
        pos += n;
        break;
      }
      case 0x43: {
        // SHORT_BINBYTES
        const n = u8();
        stack.push(Buffer.from(blob.subarray(pos, pos + n)));
        pos += n;
        break;
      }
      case 0x42: {
        // BINBYTES
        const n = u32();
        stack.push(Buffer.from(blob.subarray(pos, pos + n)));
        pos += n;
        break;
      }
      case 0x63: // GLOBAL
        stack.push({ kind: "global", module: readLine(), name: readLine() } as GlobalRef);
        break;
      case 0x93: {
        // STACK_GLOBAL
        const name = stack.pop();
        const module = stack.pop();
        stack.push({ kind: "global", module, name } as GlobalRef);
        break;
      }
      case 0x71: // BINPUT
        memo.set(u8(), stack[stack.length - 1]);
        break;
      case 0x72: // LONG_BINPUT
        memo.set(u32(), stack[stack.length - 1]);
        break;
      case 0x94: // MEMOIZE
        memo.set(memo.size, stack[stack.length - 1]);
        break;
      case 0x68: // BINGET
        stack.push(memo.get(u8()));
        break;
      case 0x6a: // LONG_BINGET
        stack.push(memo.get(u32()));
        break;
      case 0x29: // EMPTY_TUPLE
        stack.push([]);
        break;
      case 0x74: // TUPLE
        stack.push(popMark());
        break;
      case 0x85: // TUPLE1
        stack.push(stack.splice(-1));
        break;
      case 0x86: // TUPLE2
        stack.push(stack.splice(-2));
        break;
      case 0x87: // TUPLE3
        stack.push(stack.splice(-3));
        break;
      case 0x5d: // EMPTY_LIST
        stack.push([]);
        break;
      case 0x65: {
        // APPENDS
        const items = popMark();
        const list = stack[stack.length - 1];
        if (!Array.isArray(list)) throw new PickleError("APPENDS on non-list");
        list.push(...items);
        break;
      }
      case 0x61: {
        // APPEND
        const item = stack.pop();
        const list = stack[stack.length - 1];
        if (!Array.isArray(list)) throw new PickleError("APPEND on non-list");
        list.push(item);
        break;
      }
      case 0x7d: // EMPTY_DICT
        stack.push(new Map<unknown, unknown>());
        break;
      case 0x75: {
        // SETITEMS: the key/value pairs sit above the mark, the target below
        const pairs = popMark();
        setItems(stack[stack.length - 1], pairs);
        break;
      }
      case 0x73: {
        // SETITEM
        const value = stack.pop();
        const key = stack.pop();
        setItems(stack[stack.length - 1], [key, value]);
        break;
      }
      case 0x52: {
        // REDUCE
        const args = stack.pop() as unknown[];
        const func = stack.pop();
        stack.push(reduce(func, args));
        break;
      }
      case 0x62: {
        // BUILD: state updates are irrelevant for weight extraction
        stack.pop();
        break;
      }
      case 0x51: // BINPERSID
        stack.push(persistentLoad(stack.pop()));
        break;
      case 0x95: // FRAME
        pos += 8;
        break;
      default:
        throw new PickleError(
          `unsupported pickle opcode 0x${op.toString(16)} at ${pos - 1}`,
        );
    }
  }
}
