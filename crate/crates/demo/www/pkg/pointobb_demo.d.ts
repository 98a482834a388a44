/* tslint:disable */
/* eslint-disable */

/**
 * Rotated IoU of two boxes `{cx, cy, w, h, theta}` (theta in degrees) with
 * the intersection polygon and both corner lists.
 */
export function iou(a: string, b: string): string;

/**
 * The proposal bag around `(x, y)` with the pyramid level of every box.
 * `dense` picks the 7x7 layout instead of the 4x5 one.
 */
export function proposal_bag(x: number, y: number, dense: boolean): string;

/**
 * One synthetic scene as SVG: ground truth solid, points as crosses.
 */
export function scene_svg(seed: number, objects: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly iou: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly proposal_bag: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_svg: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
