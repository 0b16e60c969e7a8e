#pragma once

// Minimal zstd C ABI surface, declared directly so the header-only library
// needs no zstd development package at compile time; the runtime shared
// object provides these symbols (the build links against it).

#include <cstddef>

extern "C" {
size_t ZSTD_compressBound(size_t src_size);
unsigned ZSTD_isError(size_t code);
const char* ZSTD_getErrorName(size_t code);
size_t ZSTD_compress(void* dst, size_t dst_capacity, const void* src, size_t src_size, int level);
size_t ZSTD_decompress(void* dst, size_t dst_capacity, const void* src, size_t src_size);
}
