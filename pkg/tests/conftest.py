import torch

from diffusam.backbone import restrict_to_class


class OracleDenoiser:
    """Returns the true memory embedding of the slice whose image embedding it is shown."""

    def __init__(self, backbone, volumes):
        self.backbone = backbone
        self.memory_shape = backbone.spec.memory_shape
        self.table = {}
        for v in volumes:
            z = backbone.encode_image(v.slices)
            for i in range(v.n_slices):
                self.table[z[i].numpy().tobytes()] = v.masks[i]

    def __call__(self, x_t, t, z_img, label, adjacent=None):
        label = torch.as_tensor(label).reshape(-1).expand(x_t.shape[0])
        out = []
        for zi, lab in zip(z_img, label.tolist()):
            truth = restrict_to_class(self.table[zi.numpy().tobytes()], lab)
            out.append(self.backbone.encode_memory(truth, zi))
        return torch.stack(out)


ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
