#include "ukf/image.hpp"

#include <fstream>
#include <sstream>

namespace ukf {

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw IoError("raster header: unexpected end of file");
}

int header_int(std::istream& in, const std::string& path) {
  const std::string tok = next_token(in);
  try {
    return std::stoi(tok);
  } catch (const std::exception&) {
    throw IoError(path + ": malformed raster header token '" + tok + "'");
  }
}

}  // namespace

void write_ppm(const std::string& path, const ImageU8& img) {
  if (!img.valid()) throw IoError("write_ppm: invalid image for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_ppm: cannot open " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw IoError("write_ppm: short write to " + path);
}

ImageU8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_ppm: cannot open " + path);
  if (next_token(in) != "P6") throw IoError(path + ": not a binary PPM (P6)");
  ImageU8 img;
  img.width = header_int(in, path);
  img.height = header_int(in, path);
  const int maxval = header_int(in, path);
  if (img.width < 1 || img.height < 1 || maxval != 255) {
    throw IoError(path + ": unsupported PPM header");
  }
  in.get();  // single whitespace after maxval
  img.rgb.resize(static_cast<size_t>(3) * img.width * img.height);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw IoError(path + ": truncated PPM pixel data");
  }
  return img;
}

void write_mask_pgm(const std::string& path, const Mask& mask) {
  if (!mask.valid()) throw IoError("write_mask_pgm: invalid mask for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_mask_pgm: cannot open " + path);
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<uint8_t> bytes(mask.v.size());
  for (size_t i = 0; i < mask.v.size(); ++i) bytes[i] = mask.v[i] ? 255 : 0;
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write_mask_pgm: short write to " + path);
}

Mask read_mask_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_mask_pgm: cannot open " + path);
  if (next_token(in) != "P5") throw IoError(path + ": not a binary PGM (P5)");
  Mask mask;
  mask.width = header_int(in, path);
  mask.height = header_int(in, path);
  const int maxval = header_int(in, path);
  if (mask.width < 1 || mask.height < 1 || maxval != 255) {
    throw IoError(path + ": unsupported PGM header");
  }
  in.get();
  std::vector<uint8_t> bytes(static_cast<size_t>(mask.width) * mask.height);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError(path + ": truncated PGM pixel data");
  }
  mask.v.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) mask.v[i] = bytes[i] >= 128 ? 1 : 0;
  return mask;
}

}  // namespace ukf
