// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/io.hpp"

#include <png.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "blob format is little-endian");

namespace mkc {

namespace {

[[noreturn]] void io_fail(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error(path.string() + ": " + what);
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::binary) {
  std::ofstream out(path, mode);
  if (!out) io_fail(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::binary) {
  std::ifstream in(path, mode);
  if (!in) io_fail(path, "cannot open for reading");
  return in;
}

}  // namespace

void write_tensor_blob(std::ostream& out, const std::string& name, const Tensor& t) {
  json header;
  header["name"] = name;
  header["shape"] = t.shape();
  header["dtype"] = "f64";
  const std::string hs = header.dump();
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  out.write(kTensorMagic, sizeof(kTensorMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(t.array().data()), static_cast<std::streamsize>(t.size() * 8));
  if (!out) throw std::runtime_error("tensor blob: write failed for '" + name + "'");
}

NamedTensor read_tensor_blob(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw std::runtime_error("tensor blob: bad magic (expected MKCTENS1)");
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  if (!in) throw std::runtime_error("tensor blob: truncated header");
  json header = json::parse(hs);
  if (header.value("dtype", "") != "f64") throw std::runtime_error("tensor blob: unsupported dtype");
  Shape shape = header.at("shape").get<Shape>();
  Array data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
  if (!in) throw std::runtime_error("tensor blob: truncated payload");
  return NamedTensor{header.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))};
}

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& task_params, const ParamSet& meta_params,
                     const json& config_echo) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "mkc-checkpoint-v1";
  manifest["config"] = config_echo;
  json entries = json::array();
  std::ofstream bin = open_out(dir / "params.bin");
  auto dump = [&](const ParamSet& ps, const char* group) {
    for (const auto& [name, t] : ps.items()) {
      json e;
      e["name"] = name;
      e["shape"] = t.shape();
      e["group"] = group;
      e["offset"] = static_cast<std::int64_t>(bin.tellp());
      entries.push_back(std::move(e));
      write_tensor_blob(bin, name, t);
    }
  };
  dump(task_params, "task");
  dump(meta_params, "meta");
  manifest["params"] = std::move(entries);
  bin.close();
  save_json_file(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest = load_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != "mkc-checkpoint-v1") io_fail(dir, "not a checkpoint directory");
  Checkpoint ck;
  ck.config = manifest.value("config", json::object());
  std::ifstream bin = open_in(dir / "params.bin");
  for (const json& e : manifest.at("params")) {
    bin.seekg(e.at("offset").get<std::int64_t>());
    NamedTensor nt = read_tensor_blob(bin);
    if (nt.name != e.at("name").get<std::string>()) io_fail(dir, "manifest/blob name mismatch");
    if (e.at("group") == "meta") {
      ck.meta_params.add(nt.name, std::move(nt.value));
    } else {
      ck.task_params.add(nt.name, std::move(nt.value));
    }
  }
  return ck;
}

namespace {

Tensor image_from_gray8(const std::vector<std::uint8_t>& px, Dim h, Dim w) {
  Array a(h * w);
  for (Dim i = 0; i < h * w; ++i) a(i) = px[static_cast<size_t>(i)] / 255.0;
  return Tensor({1, h, w}, std::move(a));
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") io_fail(path, "not a PGM file");
  auto next_int = [&]() {
    // Skip whitespace and '#' comments.
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v;
    in >> v;
    if (!in) io_fail(path, "malformed PGM header");
    return v;
  };
  const Dim w = next_int(), h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) io_fail(path, "bad PGM geometry");
  Array a(h * w);
  if (magic == "P2") {
    for (Dim i = 0; i < h * w; ++i) {
      long v;
      in >> v;
      if (!in) io_fail(path, "truncated PGM data");
      a(i) = static_cast<double>(v) / maxval;
    }
  } else {
    in.get();  // single whitespace after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<std::uint8_t> buf(static_cast<size_t>(h * w * bytes));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) io_fail(path, "truncated PGM data");
    for (Dim i = 0; i < h * w; ++i) {
      const long v = bytes == 1 ? buf[static_cast<size_t>(i)]
                                : (buf[static_cast<size_t>(2 * i)] << 8) | buf[static_cast<size_t>(2 * i + 1)];
      a(i) = static_cast<double>(v) / maxval;
    }
  }
  return Tensor({1, h, w}, std::move(a));
}

Tensor read_png(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) io_fail(path, "cannot open");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    io_fail(path, "PNG decode failed");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const Dim w = png_get_image_width(png, info);
  const Dim h = png_get_image_height(png, info);
  // Normalize everything to 8-bit RGB, then average to gray.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  std::vector<std::uint8_t> row(static_cast<size_t>(w) * 3);
  Array a(h * w);
  for (Dim y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (Dim x = 0; x < w; ++x) {
      const double g = (row[static_cast<size_t>(3 * x)] + row[static_cast<size_t>(3 * x + 1)] +
                        row[static_cast<size_t>(3 * x + 2)]) /
                       (3.0 * 255.0);
      a(y * w + x) = g;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return Tensor({1, h, w}, std::move(a));
}

std::vector<std::uint8_t> quantize_gray8(const Tensor& image, Dim& h, Dim& w) {
  if (image.rank() == 3 && image.extent(0) == 1) {
    h = image.extent(1);
    w = image.extent(2);
  } else if (image.rank() == 2) {
    h = image.extent(0);
    w = image.extent(1);
  } else {
    throw std::invalid_argument("image write: expected [1,H,W] or [H,W], got " + shape_str(image.shape()));
  }
  std::vector<std::uint8_t> px(static_cast<size_t>(h * w));
  for (Dim i = 0; i < h * w; ++i) {
    const double v = std::min(1.0, std::max(0.0, image[i]));
    px[static_cast<size_t>(i)] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
  }
  return px;
}

}  // namespace

Tensor read_image_grayscale(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) io_fail(path, "no such file");
  std::ifstream probe = open_in(path);
  char sig[2] = {0, 0};
  probe.read(sig, 2);
  probe.close();
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '2')) return read_pgm(path);
  if (static_cast<unsigned char>(sig[0]) == 0x89 && sig[1] == 'P') return read_png(path);
  io_fail(path, "unsupported image format (PGM or PNG grayscale expected)");
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  Dim h = 0, w = 0;
  const std::vector<std::uint8_t> px = quantize_gray8(image, h, w);
  std::ofstream out = open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) io_fail(path, "write failed");
}

void write_png_grayscale(const std::filesystem::path& path, const Tensor& image) {
  Dim h = 0, w = 0;
  const std::vector<std::uint8_t> px = quantize_gray8(image, h, w);
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) io_fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    io_fail(path, "PNG encode failed");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Dim y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(px.data() + y * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::vector<LabelRow> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in = open_in(path, std::ios::in);
  std::vector<LabelRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string fname, ds, qs;
    if (!std::getline(ls, fname, ',') || !std::getline(ls, ds, ',') || !std::getline(ls, qs)) {
      io_fail(path, "row " + std::to_string(line_no) + ": expected filename,y_d,y_q");
    }
    if (line_no == 1 && ds == "y_d") continue;  // header
    try {
      rows.push_back(LabelRow{fname, std::stoi(ds), std::stoi(qs), line_no});
    } catch (const std::exception&) {
      io_fail(path, "row " + std::to_string(line_no) + ": non-integer label");
    }
  }
  return rows;
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in = open_in(path, std::ios::in);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    io_fail(path, std::string("JSON parse error: ") + e.what());
  }
  return j;
}

void save_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out = open_out(path, std::ios::out);
  out << j.dump(2) << "\n";
  if (!out) io_fail(path, "write failed");
}

}  // namespace mkc
