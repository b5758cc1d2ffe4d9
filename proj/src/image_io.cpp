#include "dst/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

// jpeglib.h expects FILE and size_t to be declared first.
#include <jpeglib.h>

namespace dst {

namespace {

using FilePtr = std::unique_ptr<std::FILE, decltype(&std::fclose)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
    if (!f) {
        throw IoError("cannot open " + path.string());
    }
    return f;
}

std::string lower_ext(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

bool has_png_signature(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    unsigned char sig[8] = {};
    in.read(reinterpret_cast<char*>(sig), 8);
    return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

Image from_rgb8(const std::vector<std::uint8_t>& bytes, int height, int width) {
    Image img(height, width, 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        img.values()[i] = bytes[i] / 255.0;
    }
    return img;
}

Image load_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<std::uint8_t> bytes;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("malformed PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_expand(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    if (png_get_rowbytes(png, info) != static_cast<png_size_t>(width) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG layout: " + path.string());
    }
    bytes.resize(static_cast<std::size_t>(width) * height * 3);
    rows.resize(height);
    for (int y = 0; y < height; ++y) {
        rows[y] = bytes.data() + static_cast<std::size_t>(y) * width * 3;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return from_rgb8(bytes, height, width);
}

void save_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels() != 3) {
        throw IoError("save_png: expected 3 channels");
    }
    std::vector<std::uint8_t> bytes = to_bytes(img);
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(img.height());
    for (int y = 0; y < img.height(); ++y) {
        rows[y] = bytes.data() + static_cast<std::size_t>(y) * img.width() * 3;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct JpegError {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

Image load_jpeg(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    jpeg_decompress_struct cinfo{};
    JpegError err{};
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    std::vector<std::uint8_t> bytes;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("malformed JPEG: " + path.string());
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int width = static_cast<int>(cinfo.output_width);
    const int height = static_cast<int>(cinfo.output_height);
    bytes.resize(static_cast<std::size_t>(width) * height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = bytes.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return from_rgb8(bytes, height, width);
}

void save_jpeg(const std::filesystem::path& path, const Image& img) {
    if (img.channels() != 3) {
        throw IoError("save_jpeg: expected 3 channels");
    }
    std::vector<std::uint8_t> bytes = to_bytes(img);
    FilePtr f = open_file(path, "wb");
    jpeg_compress_struct cinfo{};
    JpegError err{};
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        throw IoError("failed writing JPEG: " + path.string());
    }
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, f.get());
    cinfo.image_width = static_cast<JDIMENSION>(img.width());
    cinfo.image_height = static_cast<JDIMENSION>(img.height());
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, 95, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = bytes.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.width() * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
}

}  // namespace

std::vector<std::uint8_t> to_bytes(const Image& img) {
    std::vector<std::uint8_t> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(img.values()[i], 0.0, 1.0);
        bytes[i] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
    return bytes;
}

Image load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("no such file: " + path.string());
    }
    if (has_png_signature(path)) {
        return load_png(path);
    }
    return load_jpeg(path);
}

void save_image(const std::filesystem::path& path, const Image& img) {
    const std::string ext = lower_ext(path);
    if (ext == ".jpg" || ext == ".jpeg") {
        save_jpeg(path, img);
    } else {
        save_png(path, img);
    }
}

}  // namespace dst
