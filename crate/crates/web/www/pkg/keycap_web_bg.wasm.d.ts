/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_captiondemo_free: (a: number, b: number) => void;
export const captiondemo_attention: (a: number, b: number, c: number) => [number, number, number, number];
export const captiondemo_caption: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const captiondemo_epochs: (a: number) => number;
export const captiondemo_new: (a: number) => [number, number, number];
export const captiondemo_train_epoch: (a: number) => [number, number, number];
export const demo_options: () => [number, number];
export const score_caption: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
