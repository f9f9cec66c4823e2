#include "mambatrans/png_io.hpp"

#include <png.h>

#include <cstring>

namespace mambatrans {

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError("png write: unsupported channel count " + std::to_string(img.channels));
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * img.channels)
        throw DataError("png write: pixel buffer size mismatch for " + path);
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr))
        throw DataError("png write failed: " + path + " (" + image.message + ")");
}

ImageU8 read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw DataError("png read failed: " + path + " (" + image.message + ")");
    ImageU8 out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.channels = PNG_IMAGE_PIXEL_CHANNELS(image.format) >= 3 ? 3 : 1;
    image.format = out.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr))
        throw DataError("png decode failed: " + path + " (" + image.message + ")");
    return out;
}

}  // namespace mambatrans
