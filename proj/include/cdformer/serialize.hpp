/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

static_assert(std::endian::native == std::endian::little, "CDT1 I/O assumes a little-endian host");

/// Binary tensor blob:
///   "CDT1" | dtype u8 (0 = f32, 1 = f64) | rank u8 | extents u64 LE | data LE
template <StorageScalar T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ContractError("write_tensor: rank exceeds 255");
  os.write("CDT1", 4);
  const auto dtype = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(rank));
  for (std::size_t e : t.shape()) {
    const std::uint64_t v = e;
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw Error("write_tensor: stream write failed");
}

namespace detail {

template <typename S>
std::vector<S> read_raw(std::istream& is, std::size_t n) {
  std::vector<S> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(S)));
  if (!is) throw ParseError("CDT1: truncated element data", 0);
  return buf;
}

}  // namespace detail

/// Reads one blob; float32/float64 payloads are converted to T.
template <Scalar T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CDT1", 4) != 0) throw ParseError("CDT1: bad magic", 0);
  const int dtype = is.get();
  const int rank = is.get();
  if (!is) throw ParseError("CDT1: truncated header", 0);
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw ParseError("CDT1: truncated extents", 0);
    e = static_cast<std::size_t>(v);
  }
  const std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  if (dtype == 0) {
    const auto raw = detail::read_raw<float>(is, n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
  } else if (dtype == 1) {
    const auto raw = detail::read_raw<double>(is, n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
  } else {
    throw ParseError("CDT1: unknown dtype code " + std::to_string(dtype), 0);
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <StorageScalar T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_tensor(os, t);
}

template <Scalar T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  return read_tensor<T>(is);
}

}  // namespace cdformer
