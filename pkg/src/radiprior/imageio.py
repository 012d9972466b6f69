"""PFM (HDR) images and tonemapped PNG previews."""
import numpy as np


def write_pfm(path, image):
    """Little-endian colour PFM; rows are stored bottom to top."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        chans = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * chans
        buf = f.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"{path}: truncated pixel data")
        data = np.frombuffer(buf, dtype=dtype).reshape(h, w, chans)[::-1]
    data = data.astype(np.float32)
    return data if chans == 3 else data[..., 0]


def tonemap(image, exposure=1.0, gamma=2.2):
    return (np.clip(np.asarray(image, dtype=np.float64) * exposure, 0.0, 1.0) ** (1.0 / gamma) * 255 + 0.5).astype(np.uint8)


def write_png(path, image, exposure=1.0, gamma=2.2):
    from PIL import Image
    Image.fromarray(tonemap(image, exposure, gamma)).save(path)


def signed_colormap(values, scale=None):
    """Red for negative, blue for positive, white at zero."""
    v = np.asarray(values, dtype=np.float64)
    if scale is None:
        scale = float(np.max(np.abs(v))) or 1.0
    t = np.clip(v / scale, -1.0, 1.0)
    out = np.ones(v.shape + (3,))
    neg, pos = np.clip(-t, 0, 1), np.clip(t, 0, 1)
    out[..., 1] -= neg + pos
    out[..., 2] -= neg
    out[..., 0] -= pos
    return np.clip(out, 0, 1)
