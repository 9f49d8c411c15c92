import os
import sys
import requests
from tqdm import tqdm

# Add the project root to Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.models.backbones import load_pretrained, load_weight_table
from app.models.cmnet import build_model
from app.utils.config import ModelConfig


def download_file(url: str, destination: str):
    """Download a file with progress bar."""
    response = requests.get(url, stream=True)
    response.raise_for_status()
    total_size = int(response.headers.get('content-length', 0))

    # Create directory if it doesn't exist
    os.makedirs(os.path.dirname(destination) or ".", exist_ok=True)

    with open(destination, 'wb') as file, tqdm(
        desc=os.path.basename(destination),
        total=total_size,
        unit='iB',
        unit_scale=True,
        unit_divisor=1024,
    ) as progress_bar:
        for data in response.iter_content(chunk_size=1024):
            size = file.write(data)
            progress_bar.update(size)


def verify(path: str) -> int:
    """Check that the table loads into every backbone of the default model."""
    return load_pretrained(build_model(ModelConfig()), load_weight_table(path))


def main():
    # ImageNet-pretrained ResNet-18, torchvision key names
    weights_name = "resnet18-f37072fd.pth"
    weights_url = f"https://download.pytorch.org/models/{weights_name}"

    weights_path = os.getenv("CMNET_WEIGHTS") or os.path.join("weights", weights_name)

    print(f"Downloading {weights_name}...")
    print(f"Weights will be saved to: {weights_path}")

    try:
        download_file(weights_url, weights_path)
        copied = verify(weights_path)
        print("\nDownload completed successfully!")
        print(f"{copied} tensors map onto the network")
        print(f"Set CMNET_WEIGHTS={weights_path} to train from these weights.")
    except Exception as e:
        print(f"\nError downloading weights: {str(e)}")
        print("\nAlternative download methods:")
        print(f"1. Visit: {weights_url}")
        print(f"2. Place the file at: {weights_path}")
        print("3. Any file saved with torch.save using torchvision ResNet-18 key names also works")
        raise


if __name__ == "__main__":
    main()
