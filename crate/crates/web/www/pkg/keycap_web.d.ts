/* tslint:disable */
/* eslint-disable */

export class CaptionDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `{tokens, weights[block][head][query][key]}` as JSON.
     */
    attention(keywords: string): string;
    caption(disease: number, location: number, keywords: string, beams: number, drop_keywords: boolean, drop_image: boolean): string;
    epochs(): number;
    constructor(seed: number);
    train_epoch(): number;
}

/**
 * Keyword, severity and location choices of the synthetic corpus, as JSON.
 */
export function demo_options(): string;

/**
 * Metric scores of a candidate against newline-separated references, as
 * JSON.
 */
export function score_caption(candidate: string, references: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_captiondemo_free: (a: number, b: number) => void;
    readonly captiondemo_attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly captiondemo_caption: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly captiondemo_epochs: (a: number) => number;
    readonly captiondemo_new: (a: number) => [number, number, number];
    readonly captiondemo_train_epoch: (a: number) => [number, number, number];
    readonly demo_options: () => [number, number];
    readonly score_caption: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
