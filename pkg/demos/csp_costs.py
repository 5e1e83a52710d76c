"""Per-stage multiply-accumulates of the B0 backbone with and without cross-stage partial stages."""
import argparse

from cspdet.backbone import Backbone, BackboneConfig, stage_macs


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--image-size", type=int, default=256)
    parser.add_argument("--variant", default="B0")
    args = parser.parse_args()

    plain_cfg = BackboneConfig(variant=args.variant, use_csp=False)
    csp_cfg = BackboneConfig(variant=args.variant, use_csp=True)
    plain, csp = stage_macs(plain_cfg, args.image_size), stage_macs(csp_cfg, args.image_size)
    print(f"{'stage':>5} {'plain MACs':>14} {'CSP MACs':>14} {'saved':>7}")
    for i, (a, b) in enumerate(zip(plain, csp)):
        print(f"{i:>5} {a:>14,d} {b:>14,d} {1 - b / a:>7.1%}")
    print(f"{'total':>5} {sum(plain):>14,d} {sum(csp):>14,d} {1 - sum(csp) / sum(plain):>7.1%}")
    p, c = Backbone(plain_cfg).num_parameters(), Backbone(csp_cfg).num_parameters()
    print(f"parameters: plain {p:,}  CSP {c:,}")


if __name__ == "__main__":
    main()
